#ifndef SGSEG_ORCHESTRATOR_HPP
#define SGSEG_ORCHESTRATOR_HPP

#include <algorithm>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sgseg/affinity.hpp"
#include "sgseg/config.hpp"
#include "sgseg/guided.hpp"
#include "sgseg/micronet.hpp"
#include "sgseg/parallel.hpp"
#include "sgseg/pseudolabel.hpp"
#include "sgseg/synth.hpp"

namespace sgseg {

struct LossRecord {
  std::size_t outer = 0;
  std::string step;  // "step1" or "step2"
  std::size_t iteration = 0;
  double primary = 0.0;   // classification or segmentation loss, batch mean
  double affinity = 0.0;  // batch mean of the affinity loss (step 1 only)
  double joint = 0.0;
};

using LossSink = std::function<void(const LossRecord&)>;

namespace detail {

// Epoch-wise shuffled sampling without replacement.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::swap(order_[i - 1], order_[uniform_index(rng_, i)]);
    }
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline Tensor crop_image(const Tensor& image, std::size_t y0, std::size_t x0,
                         std::size_t size) {
  Tensor out({image.dim(0), size, size});
  for (std::size_t c = 0; c < image.dim(0); ++c) {
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        out.at(c, y, x) = image.at(c, y0 + y, x0 + x);
      }
    }
  }
  return out;
}

}  // namespace detail

struct Step1Result {
  double classification = 0.0;
  double affinity = 0.0;
};

/// Per-image joint objective L_cls + lambda L_aff and its gradient.
inline MicroNetParams step1_gradient(const SampleRecord& sample,
                                     const MicroNetParams& params,
                                     const TrainConfig& config,
                                     Step1Result& losses) {
  const auto cache = micronet_forward(sample.image, params);
  const auto cls = classification_loss(cache.scores, sample.labels);
  auto grads = micronet_backward(cache, params,
                                 scores_to_map_grad(cache, cls.d_scores), Tensor());
  losses.classification = cls.loss;
  const auto color = color_similarity(sample.image, config.affinity_h, config.affinity_w);
  const auto aff = affinity_objective(cache.features, params, color,
                                      config.affinity_h, config.affinity_w);
  losses.affinity = aff.loss;
  const auto lambda = static_cast<float>(config.lambda);
  for (std::size_t i = 0; i < aff.d_agg_w.size(); ++i) grads.agg_w[i] = lambda * aff.d_agg_w[i];
  for (std::size_t i = 0; i < aff.d_agg_b.size(); ++i) grads.agg_b[i] = lambda * aff.d_agg_b[i];
  return grads;
}

namespace detail {

// Batch-mean gradient with a fixed-order reduction.
template <typename PerImage>
MicroNetParams batch_gradient(const MicroNetParams& params,
                              const std::vector<std::size_t>& batch,
                              PerImage&& per_image) {
  std::vector<MicroNetParams> parts(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) { parts[i] = per_image(i); });
  MicroNetParams total(params.num_classes, params.agg_channels);
  for (const auto& p : parts) total.add(p);
  total.scale(1.0f / static_cast<float>(batch.size()));
  return total;
}

}  // namespace detail

/// Step 1: SGD on the joint classification + affinity objective. Updates the
/// backbone, localization head and aggregation conv; the segmentation head is
/// frozen.
inline void step1_train(const std::vector<SampleRecord>& dataset,
                        MicroNetParams& params, const TrainConfig& config,
                        std::size_t outer = 1, const LossSink& sink = {}) {
  detail::require(!dataset.empty(), "step1_train on empty dataset");
  detail::BatchSampler sampler(dataset.size(), detail::mix_seed(config.seed, 100 + outer));
  const PolySchedule schedule{static_cast<float>(config.step1_lr), config.step1_iters,
                              static_cast<float>(config.lr_power)};
  const GroupMask mask{true, false, true, true};
  for (std::size_t t = 0; t < config.step1_iters; ++t) {
    const auto batch = sampler.next(config.step1_batch);
    std::vector<Step1Result> losses(batch.size());
    const auto grads = detail::batch_gradient(params, batch, [&](std::size_t i) {
      return step1_gradient(dataset[batch[i]], params, config, losses[i]);
    });
    sgd_step(params, grads, t, schedule, mask);
    if (sink) {
      LossRecord rec{outer, "step1", t, 0.0, 0.0, 0.0};
      for (const auto& l : losses) {
        rec.primary += l.classification;
        rec.affinity += l.affinity;
      }
      rec.primary /= static_cast<double>(batch.size());
      rec.affinity /= static_cast<double>(batch.size());
      rec.joint = rec.primary + config.lambda * rec.affinity;
      sink(rec);
    }
  }
}

struct Step2Result {
  double loss = 0.0;
  double filter_alpha_grad = 0.0;  // |sum dL/dalpha| when filter_logits is on
};

/// Per-image segmentation gradient on a crop. With filter_logits the logits
/// pass through a luma-guided filter before the loss and the gradient flows
/// back through K^T.
inline MicroNetParams step2_gradient(const Tensor& image_crop,
                                     const LabelMap& label_crop,
                                     const MicroNetParams& params,
                                     const TrainConfig& config,
                                     Step2Result& result) {
  const auto cache = micronet_forward(image_crop, params);
  const std::size_t lh = cache.seg_logits.dim(1), lw = cache.seg_logits.dim(2);
  const LabelMap target = downsample_nearest(label_crop, lh, lw);
  if (!config.filter_logits) {
    auto seg = segmentation_loss(cache.seg_logits, target);
    result.loss = seg.loss;
    return micronet_backward(cache, params, Tensor(), seg.d_logits);
  }
  const GuidedFilter filter(luma(resize_bilinear(image_crop, lh, lw)),
                            std::min<std::size_t>(1, std::min(lh, lw)),
                            config.gf_epsilon);
  Tensor filtered(cache.seg_logits.shape());
  for (std::size_t c = 0; c < filtered.dim(0); ++c) {
    const auto src = cache.seg_logits.channel(c);
    const auto out = filter.apply(Tensor({lh, lw}, std::vector<float>(src.begin(), src.end())));
    std::copy(out.output.values().begin(), out.output.values().end(),
              filtered.channel(c).begin());
  }
  auto seg = segmentation_loss(filtered, target);
  result.loss = seg.loss;
  Tensor d_logits(cache.seg_logits.shape());
  double alpha_grad = 0.0;
  for (std::size_t c = 0; c < filtered.dim(0); ++c) {
    const auto up = seg.d_logits.channel(c);
    GuidedGrads g;
    filter.accumulate_backward(Tensor({lh, lw}, std::vector<float>(up.begin(), up.end())), g);
    std::copy(g.input.values().begin(), g.input.values().end(), d_logits.channel(c).begin());
    for (float v : g.alpha.values()) alpha_grad += v;
  }
  result.filter_alpha_grad = std::fabs(alpha_grad);
  return micronet_backward(cache, params, Tensor(), d_logits);
}

/// Step 2: SGD on the segmentation loss against fixed pseudo labels, using
/// random square crops. Only the backbone and segmentation head change.
inline void step2_train(const std::vector<SampleRecord>& dataset,
                        const std::vector<LabelMap>& labels,
                        MicroNetParams& params, const TrainConfig& config,
                        std::size_t outer = 1, const LossSink& sink = {}) {
  detail::require(!dataset.empty() && labels.size() == dataset.size(),
                  "step2_train needs one label map per image");
  detail::BatchSampler sampler(dataset.size(), detail::mix_seed(config.seed, 200 + outer));
  const PolySchedule schedule{static_cast<float>(config.step2_lr), config.step2_iters,
                              static_cast<float>(config.lr_power)};
  const GroupMask mask{true, true, false, false};
  for (std::size_t t = 0; t < config.step2_iters; ++t) {
    const auto batch = sampler.next(config.step2_batch);
    struct Crop {
      std::size_t y0, x0;
    };
    std::vector<Crop> crops(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& img = dataset[batch[i]].image;
      const std::size_t span_y = img.dim(1) - config.crop_size + 1;
      const std::size_t span_x = img.dim(2) - config.crop_size + 1;
      crops[i] = {detail::uniform_index(sampler.rng(), span_y),
                  detail::uniform_index(sampler.rng(), span_x)};
    }
    std::vector<Step2Result> results(batch.size());
    const auto grads = detail::batch_gradient(params, batch, [&](std::size_t i) {
      const auto& s = dataset[batch[i]];
      const auto img = detail::crop_image(s.image, crops[i].y0, crops[i].x0, config.crop_size);
      const auto lab = crop(labels[batch[i]], crops[i].y0, crops[i].x0, config.crop_size,
                            config.crop_size);
      return step2_gradient(img, lab, params, config, results[i]);
    });
    sgd_step(params, grads, t, schedule, mask);
    if (sink) {
      LossRecord rec{outer, "step2", t, 0.0, 0.0, 0.0};
      for (const auto& r : results) rec.primary += r.loss;
      rec.primary /= static_cast<double>(batch.size());
      rec.joint = rec.primary;
      sink(rec);
    }
  }
}

// Pseudo-label candidates for one image at each refinement stage.
struct ImageStages {
  LocalizationMaps a;          // initial maps at the affinity grid
  LocalizationMaps r;          // after the random walk
  LocalizationMaps g_first;    // after one guided-filter pass
  LocalizationMaps g_final;    // after sg_iterations passes
  LabelMap label_a, label_r, label_g, label_final;
  bool degenerate = false;
};

/// Random walk, self-guided refinement and labeling for given initial maps
/// and transition matrix.
inline ImageStages refine_stages(const Tensor& image, LocalizationMaps a,
                                 const PixelMatrix& transition,
                                 const TrainConfig& config) {
  const std::size_t h = image.dim(1), w = image.dim(2);
  ImageStages s;
  s.a = std::move(a);
  s.r = random_walk_refine(transition, s.a);
  auto upsampled = [&](const LocalizationMaps& m) {
    return LocalizationMaps{resize_bilinear(m.maps, h, w), m.class_ids};
  };
  s.label_a = assign_pseudo_labels(upsampled(s.a)).labels;
  s.label_r = assign_pseudo_labels(upsampled(s.r)).labels;
  const auto sg = self_guided_refine(
      image, s.r, config.sg_iterations, config.gf_radius, config.gf_epsilon,
      [&](std::size_t it, const LocalizationMaps& g) {
        if (it == 1) s.g_first = g;
      });
  s.g_final = sg.refined;
  s.label_g = assign_pseudo_labels(s.g_first).labels;
  const auto final_labels = assign_pseudo_labels(s.g_final);
  s.label_final = final_labels.labels;
  s.degenerate = sg.degenerate || final_labels.degenerate;
  return s;
}

inline ImageStages pseudo_label_image(const SampleRecord& sample,
                                      const MicroNetParams& params,
                                      const TrainConfig& config) {
  const auto cache = micronet_forward(sample.image, params);
  auto a = select_present_maps(cache.loc_maps, sample.labels, config.affinity_h,
                               config.affinity_w);
  const auto agg = aggregate_features(cache.features, params.agg_w, params.agg_b,
                                      config.affinity_h, config.affinity_w);
  const auto affinity = build_affinity(agg.features);
  return refine_stages(sample.image, std::move(a), affinity.T, config);
}

inline const std::vector<std::string>& pseudo_stage_keys() {
  static const std::vector<std::string> keys{"A", "R", "G", "G-final"};
  return keys;
}

struct PseudoLabelOutput {
  std::vector<LabelMap> labels;             // final-stage pseudo labels
  std::vector<ConfusionMatrix> stage_confusion;  // A, R, G, G-final vs gt
  std::size_t degenerate = 0;
  std::size_t evaluated = 0;  // images with ground truth
};

/// Runs the refinement pipeline on every image. Degenerate images get
/// all-background labels and are counted.
inline PseudoLabelOutput generate_pseudo_labels(
    const std::vector<SampleRecord>& dataset, const MicroNetParams& params,
    const TrainConfig& config,
    const std::function<void(std::size_t, const ImageStages&)>& inspect = {}) {
  PseudoLabelOutput out;
  out.labels.resize(dataset.size());
  std::vector<ImageStages> stages(dataset.size());
  parallel_for(dataset.size(), [&](std::size_t i) {
    stages[i] = pseudo_label_image(dataset[i], params, config);
  });
  out.stage_confusion.assign(4, ConfusionMatrix(config.num_classes));
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    auto& s = stages[i];
    if (s.degenerate) {
      ++out.degenerate;
      s.label_final = LabelMap(s.label_final.height, s.label_final.width);
    }
    if (inspect) inspect(i, s);
    if (dataset[i].gt) {
      ++out.evaluated;
      out.stage_confusion[0].add(s.label_a, *dataset[i].gt);
      out.stage_confusion[1].add(s.label_r, *dataset[i].gt);
      out.stage_confusion[2].add(s.label_g, *dataset[i].gt);
      out.stage_confusion[3].add(s.label_final, *dataset[i].gt);
    }
    out.labels[i] = std::move(s.label_final);
  }
  return out;
}

/// Dense prediction: logits upsampled (bilinear) to image size, then argmax.
inline LabelMap predict_segmentation(const Tensor& image, const MicroNetParams& params) {
  const auto cache = micronet_forward(image, params);
  return argmax_labels(resize_bilinear(cache.seg_logits, image.dim(1), image.dim(2)));
}

inline IoUReport evaluate_segmentation(const std::vector<SampleRecord>& dataset,
                                       const MicroNetParams& params) {
  std::vector<LabelMap> preds(dataset.size());
  parallel_for(dataset.size(), [&](std::size_t i) {
    preds[i] = predict_segmentation(dataset[i].image, params);
  });
  ConfusionMatrix cm(params.num_classes);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].gt) cm.add(preds[i], *dataset[i].gt);
  }
  return cm.report();
}

struct ReportRow {
  std::size_t outer = 0;
  std::string stage;
  double miou = 0.0;
  std::size_t degenerate = 0;
  std::size_t images = 0;
};

struct RunReport {
  std::vector<ReportRow> rows;
  std::vector<LossRecord> losses;

  const ReportRow* find(std::size_t outer, const std::string& stage) const {
    for (const auto& r : rows) {
      if (r.outer == outer && r.stage == stage) return &r;
    }
    return nullptr;
  }
};

inline std::string report_header() {
  return "outer_iter\tstage\tmiou\tdegenerate_images\timages\n";
}

inline std::string format_report_row(const ReportRow& r) {
  std::ostringstream os;
  os << r.outer << '\t' << r.stage << '\t' << std::fixed << std::setprecision(6)
     << r.miou << '\t' << r.degenerate << '\t' << r.images << '\n';
  return os.str();
}

inline std::string format_report(const RunReport& report) {
  std::string out = report_header();
  for (const auto& r : report.rows) out += format_report_row(r);
  return out;
}

inline std::string format_losses(const std::vector<LossRecord>& losses) {
  std::ostringstream os;
  os << "outer_iter\tstep\titeration\tloss\taffinity_loss\tjoint_loss\n";
  os << std::setprecision(9);
  for (const auto& l : losses) {
    os << l.outer << '\t' << l.step << '\t' << l.iteration << '\t' << l.primary << '\t'
       << l.affinity << '\t' << l.joint << '\n';
  }
  return os.str();
}

struct RunHooks {
  std::function<void(const ReportRow&)> on_row;
  LossSink on_loss;
  std::function<void(const std::string&)> on_progress;
};

struct RunResult {
  RunReport report;
  MicroNetParams params;
  std::vector<LabelMap> pseudo_labels;
};

/// Fresh network for a run; the seed stream is shared with the CLI.
inline MicroNetParams initial_params(const TrainConfig& config) {
  return init_micronet(config.num_classes, config.agg_channels, detail::mix_seed(config.seed, 1),
                       static_cast<float>(config.head_init_std),
                       static_cast<float>(config.agg_init_std));
}

/// Alternating training: for each outer iteration, step 1, pseudo-label
/// regeneration, step 2, then validation. Rows are emitted as soon as they
/// exist so a failing run leaves a partial report.
inline RunResult run_algorithm1(const TrainConfig& config,
                                const std::vector<SampleRecord>& train,
                                const std::vector<SampleRecord>& val,
                                const RunHooks& hooks = {}) {
  config.validate();
  RunResult result;
  result.params = initial_params(config);
  auto emit = [&](ReportRow row) {
    if (hooks.on_row) hooks.on_row(row);
    result.report.rows.push_back(std::move(row));
  };
  auto progress = [&](const std::string& msg) {
    if (hooks.on_progress) hooks.on_progress(msg);
  };
  const LossSink sink = [&](const LossRecord& rec) {
    if (hooks.on_loss) hooks.on_loss(rec);
    result.report.losses.push_back(rec);
  };
  const std::vector<std::string> names{"A", "R", "G", config.stage_name_final()};
  for (std::size_t outer = 1; outer <= config.outer_iterations; ++outer) {
    progress("outer " + std::to_string(outer) + ": step 1");
    step1_train(train, result.params, config, outer, sink);
    progress("outer " + std::to_string(outer) + ": pseudo labels");
    auto pseudo = generate_pseudo_labels(train, result.params, config);
    for (std::size_t s = 0; s < names.size(); ++s) {
      emit({outer, names[s], pseudo.stage_confusion[s].report().miou, pseudo.degenerate,
            pseudo.evaluated});
    }
    progress("outer " + std::to_string(outer) + ": step 2");
    if (config.oracle_labels) {
      std::vector<LabelMap> gt;
      for (const auto& s : train) {
        detail::require(s.gt.has_value(), "oracle_labels needs ground truth for every image");
        gt.push_back(*s.gt);
      }
      step2_train(train, gt, result.params, config, outer, sink);
    } else {
      step2_train(train, pseudo.labels, result.params, config, outer, sink);
    }
    const auto seg = evaluate_segmentation(val, result.params);
    emit({outer, "seg-val", seg.miou, 0, val.size()});
    result.pseudo_labels = std::move(pseudo.labels);
  }
  return result;
}

/// Training-set and validation-set generation for a config.
inline std::vector<SampleRecord> make_train_set(const TrainConfig& c) {
  return synth_dataset(c.train_images, c.image_size, c.num_classes - 1,
                       detail::mix_seed(c.seed, 10));
}
inline std::vector<SampleRecord> make_val_set(const TrainConfig& c) {
  return synth_dataset(c.val_images, c.image_size, c.num_classes - 1,
                       detail::mix_seed(c.seed, 11));
}

}  // namespace sgseg

#endif  // SGSEG_ORCHESTRATOR_HPP
