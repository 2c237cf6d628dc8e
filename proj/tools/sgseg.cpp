// Command-line front end: dataset synthesis, the alternating training run,
// the individual steps, evaluation and visualization.
//
// Exit codes: 0 success, 1 usage or config error, 2 data error.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sgseg/checkpoint.hpp"
#include "sgseg/config.hpp"
#include "sgseg/dataset_io.hpp"
#include "sgseg/netpbm.hpp"
#include "sgseg/orchestrator.hpp"

namespace fs = std::filesystem;
using namespace sgseg;

namespace {

constexpr int kUsageError = 1;
constexpr int kDataError = 2;

// Raised for problems with the invocation that CLI11 cannot see, such as a
// missing input directory.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", path, "key=value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", overrides, "override one config key (key=value), repeatable");
    cmd->add_option("--seed", seed, "seed override");
  }

  TrainConfig load() const {
    TrainConfig c = path.empty() ? TrainConfig{} : load_config(path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) c.seed = *seed;
    c.validate();
    return c;
  }
};

void require_dir(const std::string& path, const char* what) {
  if (!fs::is_directory(path)) throw UsageError(std::string(what) + " directory not found: " + path);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::vector<SampleRecord> dataset_or_synth(const std::string& dir, const TrainConfig& c, bool train) {
  if (!dir.empty()) return read_dataset(dir, c.num_classes);
  return train ? make_train_set(c) : make_val_set(c);
}

std::vector<LabelMap> read_label_dir(const fs::path& dir, std::size_t count) {
  std::vector<LabelMap> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(read_pgm_labels(dir / (image_id(i) + ".pgm")));
  return out;
}

void write_label_dir(const fs::path& dir, const std::vector<LabelMap>& labels) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    write_pgm_labels(dir / (image_id(i) + ".pgm"), labels[i]);
  }
}

void print_progress(const std::string& msg) { std::fprintf(stderr, "[sgseg] %s\n", msg.c_str()); }

LossSink periodic_loss_printer() {
  return [](const LossRecord& r) {
    if ((r.iteration + 1) % 100 == 0) {
      std::fprintf(stderr, "[sgseg] outer %zu %s iter %zu loss %.5f\n", r.outer, r.step.c_str(),
                   r.iteration + 1, r.primary);
    }
  };
}

void print_stage_table(const PseudoLabelOutput& out) {
  const auto& keys = pseudo_stage_keys();
  for (std::size_t s = 0; s < keys.size(); ++s) {
    std::printf("%s\t%.6f\n", keys[s].c_str(), out.stage_confusion[s].report().miou);
  }
  std::printf("degenerate_images\t%zu\n", out.degenerate);
}

// --------------------------------------------------------------------------

int cmd_synth(const std::string& out, std::size_t num, std::size_t size, std::size_t classes,
              std::uint64_t seed) {
  const auto data = synth_dataset(num, size, classes, seed);
  write_dataset(out, data);
  std::printf("wrote %zu images to %s\n", data.size(), out.c_str());
  return 0;
}

int cmd_run(const ConfigArgs& cfg, const std::string& out, const std::string& train_dir,
            const std::string& val_dir) {
  const TrainConfig c = cfg.load();
  if (!train_dir.empty()) require_dir(train_dir, "training");
  if (!val_dir.empty()) require_dir(val_dir, "validation");
  const auto train = dataset_or_synth(train_dir, c, true);
  const auto val = dataset_or_synth(val_dir, c, false);

  fs::create_directories(out);
  write_text(fs::path(out) / "config.txt", format_config(c));
  // The report is flushed row by row so a failed run still leaves the rows
  // computed so far.
  std::ofstream report(fs::path(out) / "report.tsv", std::ios::binary | std::ios::trunc);
  report << report_header() << std::flush;
  RunHooks hooks;
  hooks.on_row = [&](const ReportRow& row) {
    report << format_report_row(row) << std::flush;
    std::printf("%zu\t%s\t%.6f\n", row.outer, row.stage.c_str(), row.miou);
    std::fflush(stdout);
  };
  hooks.on_loss = periodic_loss_printer();
  hooks.on_progress = print_progress;
  const auto result = run_algorithm1(c, train, val, hooks);
  write_text(fs::path(out) / "losses.tsv", format_losses(result.report.losses));
  save_checkpoint(fs::path(out) / "checkpoint", result.params);
  write_label_dir(fs::path(out) / "pseudo", result.pseudo_labels);
  return 0;
}

int cmd_step1(const ConfigArgs& cfg, const std::string& data_dir, const std::string& init,
              const std::string& out, std::size_t outer) {
  const TrainConfig c = cfg.load();
  require_dir(data_dir, "dataset");
  if (!init.empty()) require_dir(init, "checkpoint");
  const auto data = read_dataset(data_dir, c.num_classes);
  auto params = init.empty() ? initial_params(c) : load_checkpoint(init);
  std::vector<LossRecord> losses;
  const auto printer = periodic_loss_printer();
  step1_train(data, params, c, outer, [&](const LossRecord& r) {
    printer(r);
    losses.push_back(r);
  });
  save_checkpoint(out, params);
  write_text(fs::path(out) / "losses.tsv", format_losses(losses));
  return 0;
}

int cmd_pseudo(const ConfigArgs& cfg, const std::string& data_dir, const std::string& checkpoint,
               const std::string& out, bool stages) {
  const TrainConfig c = cfg.load();
  require_dir(data_dir, "dataset");
  require_dir(checkpoint, "checkpoint");
  const auto data = read_dataset(data_dir, c.num_classes);
  const auto params = load_checkpoint(checkpoint);
  std::function<void(std::size_t, const ImageStages&)> inspect;
  if (stages) {
    fs::create_directories(fs::path(out) / "stages");
    inspect = [&](std::size_t i, const ImageStages& s) {
      const auto base = fs::path(out) / "stages" / image_id(i);
      write_pgm_labels(base.string() + "_A.pgm", s.label_a);
      write_pgm_labels(base.string() + "_R.pgm", s.label_r);
      write_pgm_labels(base.string() + "_G.pgm", s.label_g);
      write_pgm_labels(base.string() + "_G-final.pgm", s.label_final);
    };
  }
  const auto result = generate_pseudo_labels(data, params, c, inspect);
  write_label_dir(out, result.labels);
  if (result.evaluated) print_stage_table(result);
  return 0;
}

int cmd_step2(const ConfigArgs& cfg, const std::string& data_dir, const std::string& labels_dir,
              const std::string& checkpoint, const std::string& out, std::size_t outer) {
  const TrainConfig c = cfg.load();
  require_dir(data_dir, "dataset");
  require_dir(labels_dir, "label");
  require_dir(checkpoint, "checkpoint");
  const auto data = read_dataset(data_dir, c.num_classes);
  const auto labels = read_label_dir(labels_dir, data.size());
  auto params = load_checkpoint(checkpoint);
  std::vector<LossRecord> losses;
  const auto printer = periodic_loss_printer();
  step2_train(data, labels, params, c, outer, [&](const LossRecord& r) {
    printer(r);
    losses.push_back(r);
  });
  save_checkpoint(out, params);
  write_text(fs::path(out) / "losses.tsv", format_losses(losses));
  return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& truth_dir, std::size_t classes) {
  require_dir(pred_dir, "prediction");
  require_dir(truth_dir, "ground-truth");
  std::vector<fs::path> names;
  for (const auto& e : fs::directory_iterator(truth_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".pgm") names.push_back(e.path().filename());
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw std::runtime_error("no .pgm label maps in " + truth_dir);
  ConfusionMatrix cm(classes);
  for (const auto& name : names) {
    const auto pred = fs::path(pred_dir) / name;
    if (!fs::exists(pred)) throw std::runtime_error("missing prediction " + pred.string());
    cm.add(read_pgm_labels(pred), read_pgm_labels(fs::path(truth_dir) / name));
  }
  const auto r = cm.report();
  for (std::size_t c = 0; c < classes; ++c) {
    if (r.defined[c]) std::printf("class_%zu\t%.6f\n", c, r.per_class_iou[c]);
  }
  std::printf("mIoU\t%.6f\n", r.miou);
  return 0;
}

int cmd_viz(const std::string& in, const std::string& out) {
  std::vector<fs::path> inputs;
  if (fs::is_directory(in)) {
    for (const auto& e : fs::directory_iterator(in)) {
      if (e.is_regular_file() && e.path().extension() == ".pgm") inputs.push_back(e.path());
    }
    std::sort(inputs.begin(), inputs.end());
  } else if (fs::is_regular_file(in)) {
    inputs.push_back(in);
  } else {
    throw UsageError("viz input not found: " + in);
  }
  fs::create_directories(out);
  for (const auto& p : inputs) {
    auto target = fs::path(out) / p.filename();
    target.replace_extension(".ppm");
    write_ppm(target, viz_labelmap(read_pgm_labels(p)));
  }
  std::printf("wrote %zu images to %s\n", inputs.size(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised segmentation with affinity and self-guided refinement"};
  app.require_subcommand(1);

  std::string out, data_dir, train_dir, val_dir, checkpoint, labels_dir, pred_dir, truth_dir, viz_in;
  std::size_t num = 200, size = 64, fg_classes = 3, outer = 1, eval_classes = 4;
  std::uint64_t synth_seed = 7;
  bool stages = false;
  ConfigArgs run_cfg, step1_cfg, pseudo_cfg, step2_cfg;

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset directory");
  synth->add_option("-o,--out", out, "output directory")->required();
  synth->add_option("--num", num, "number of images")->check(CLI::PositiveNumber);
  synth->add_option("--size", size, "image side in pixels");
  synth->add_option("--classes", fg_classes, "number of foreground classes");
  synth->add_option("--seed", synth_seed, "random seed");

  auto* run = app.add_subcommand("run", "alternating training (both steps, all outer iterations)");
  run_cfg.attach(run);
  run->add_option("-o,--out", out, "output directory")->required();
  run->add_option("--train", train_dir, "training dataset directory (default: synthesize)");
  run->add_option("--val", val_dir, "validation dataset directory (default: synthesize)");

  auto* step1 = app.add_subcommand("step1", "classification + affinity training");
  step1_cfg.attach(step1);
  step1->add_option("-d,--data", data_dir, "dataset directory")->required();
  step1->add_option("--init", checkpoint, "starting checkpoint (default: fresh network)");
  step1->add_option("-o,--out", out, "checkpoint directory to write")->required();
  step1->add_option("--outer", outer, "outer iteration index (selects the sampling stream)");

  auto* pseudo = app.add_subcommand("pseudo", "generate pseudo labels from a checkpoint");
  pseudo_cfg.attach(pseudo);
  pseudo->add_option("-d,--data", data_dir, "dataset directory")->required();
  pseudo->add_option("-k,--checkpoint", checkpoint, "checkpoint directory")->required();
  pseudo->add_option("-o,--out", out, "label directory to write")->required();
  pseudo->add_flag("--stages", stages, "also write per-stage label maps under stages/");

  auto* step2 = app.add_subcommand("step2", "segmentation training on pseudo labels");
  step2_cfg.attach(step2);
  step2->add_option("-d,--data", data_dir, "dataset directory")->required();
  step2->add_option("-l,--labels", labels_dir, "pseudo-label directory")->required();
  step2->add_option("-k,--checkpoint", checkpoint, "starting checkpoint")->required();
  step2->add_option("-o,--out", out, "checkpoint directory to write")->required();
  step2->add_option("--outer", outer, "outer iteration index (selects the sampling stream)");

  auto* eval = app.add_subcommand("eval", "mIoU between two label-map directories");
  eval->add_option("--pred", pred_dir, "predicted label maps")->required();
  eval->add_option("--truth", truth_dir, "ground-truth label maps")->required();
  eval->add_option("--classes", eval_classes, "number of classes including background")
      ->check(CLI::Range(2, 256));

  auto* viz = app.add_subcommand("viz", "render PGM label maps as palette PPM images");
  viz->add_option("-i,--in", viz_in, "label map file or directory")->required();
  viz->add_option("-o,--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*synth) return cmd_synth(out, num, size, fg_classes, synth_seed);
    if (*run) return cmd_run(run_cfg, out, train_dir, val_dir);
    if (*step1) return cmd_step1(step1_cfg, data_dir, checkpoint, out, outer);
    if (*pseudo) return cmd_pseudo(pseudo_cfg, data_dir, checkpoint, out, stages);
    if (*step2) return cmd_step2(step2_cfg, data_dir, labels_dir, checkpoint, out, outer);
    if (*eval) return cmd_eval(pred_dir, truth_dir, eval_classes);
    if (*viz) return cmd_viz(viz_in, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  }
  return kUsageError;
}
