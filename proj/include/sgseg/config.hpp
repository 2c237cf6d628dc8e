#ifndef SGSEG_CONFIG_HPP
#define SGSEG_CONFIG_HPP

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgseg {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Hyperparameters of the alternating training run. Defaults are the
// 64x64 synthetic-scale settings.
struct TrainConfig {
  std::size_t num_classes = 4;  // background + 3 shape classes
  std::size_t agg_channels = 3;
  std::size_t affinity_w = 16;
  std::size_t affinity_h = 16;
  double lambda = 1.0;
  std::size_t outer_iterations = 2;
  std::size_t sg_iterations = 15;
  std::size_t gf_radius = 3;
  double gf_epsilon = 1e-6;
  std::size_t crop_size = 48;
  std::size_t step1_batch = 8;
  std::size_t step2_batch = 8;
  double step1_lr = 0.1;
  double step2_lr = 0.05;
  std::size_t step1_iters = 2000;
  std::size_t step2_iters = 1000;
  double lr_power = 0.9;
  std::uint64_t seed = 7;
  std::size_t train_images = 200;
  std::size_t val_images = 50;
  std::size_t image_size = 64;
  double head_init_std = 0.1;  // Gaussian std of the seg and loc heads
  double agg_init_std = 1.0;   // Gaussian std of the aggregation conv
  bool filter_logits = false;  // route step-2 loss through a guided filter
  bool oracle_labels = false;  // train step 2 on ground truth (upper bound)

  std::string stage_name_final() const {
    return "G-iter" + std::to_string(sg_iterations);
  }

  void validate() const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError(msg);
    };
    need(num_classes >= 2, "num_classes must be >= 2");
    need(agg_channels >= 1, "agg_channels must be >= 1");
    need(affinity_w >= 1 && affinity_h >= 1, "affinity grid must be >= 1x1");
    need(lambda > 0.0, "lambda must be > 0");
    need(outer_iterations >= 1, "outer_iterations must be >= 1");
    need(sg_iterations >= 1, "sg_iterations must be >= 1");
    need(gf_radius >= 1, "gf_radius must be >= 1");
    need(gf_epsilon > 0.0, "gf_epsilon must be > 0");
    need(step1_batch >= 1 && step2_batch >= 1, "batch sizes must be >= 1");
    need(step1_iters >= 1 && step2_iters >= 1, "iteration counts must be >= 1");
    need(step1_lr >= 0.0 && step2_lr >= 0.0, "learning rates must be >= 0");
    need(train_images >= 1, "train_images must be >= 1");
    need(image_size % 4 == 0, "image_size must be divisible by 4");
    need(crop_size % 4 == 0 && crop_size >= 4 && crop_size <= image_size,
         "crop_size must be a multiple of 4 within the image");
    need(gf_radius <= image_size, "gf_radius exceeds image size");
    need(head_init_std > 0.0, "head_init_std must be > 0");
    need(agg_init_std > 0.0, "agg_init_std must be > 0");
  }
};

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  const auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc() || res.ptr != last) {
    throw ConfigError("bad value for " + key + ": '" + text + "'");
  }
  return value;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct ConfigField {
  const char* key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename T>
std::string to_text(T v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline ConfigField bool_field(const char* key, bool TrainConfig::*member) {
  return {key,
          [key, member](TrainConfig& c, const std::string& v) {
            if (v == "true" || v == "1") {
              c.*member = true;
            } else if (v == "false" || v == "0") {
              c.*member = false;
            } else {
              throw ConfigError(std::string("bad value for ") + key + ": '" + v + "'");
            }
          },
          [member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

#define SGSEG_FIELD(name)                                                     \
  ConfigField {                                                              \
    #name,                                                                   \
        [](TrainConfig& c, const std::string& v) {                           \
          c.name = parse_number<decltype(c.name)>(#name, v);                 \
        },                                                                   \
        [](const TrainConfig& c) { return to_text(c.name); }                 \
  }

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      SGSEG_FIELD(num_classes),   SGSEG_FIELD(agg_channels),
      SGSEG_FIELD(affinity_w),    SGSEG_FIELD(affinity_h),
      SGSEG_FIELD(lambda),        SGSEG_FIELD(outer_iterations),
      SGSEG_FIELD(sg_iterations), SGSEG_FIELD(gf_radius),
      SGSEG_FIELD(gf_epsilon),    SGSEG_FIELD(crop_size),
      SGSEG_FIELD(step1_batch),   SGSEG_FIELD(step2_batch),
      SGSEG_FIELD(step1_lr),      SGSEG_FIELD(step2_lr),
      SGSEG_FIELD(step1_iters),   SGSEG_FIELD(step2_iters),
      SGSEG_FIELD(lr_power),      SGSEG_FIELD(seed),
      SGSEG_FIELD(train_images),  SGSEG_FIELD(val_images),
      SGSEG_FIELD(image_size),    SGSEG_FIELD(head_init_std),
      SGSEG_FIELD(agg_init_std),
      bool_field("filter_logits", &TrainConfig::filter_logits),
      bool_field("oracle_labels", &TrainConfig::oracle_labels),
  };
  return fields;
}

#undef SGSEG_FIELD

}  // namespace detail

/// Applies one key=value assignment; unknown keys are rejected.
inline void set_config_value(TrainConfig& config, const std::string& key,
                             const std::string& value) {
  for (const auto& f : detail::config_fields()) {
    if (key == f.key) {
      f.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Flat key=value text; blank lines and '#' comments are ignored.
inline TrainConfig parse_config(const std::string& text) {
  TrainConfig config;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
    }
    set_config_value(config, detail::trim(line.substr(0, eq)),
                     detail::trim(line.substr(eq + 1)));
  }
  config.validate();
  return config;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string format_config(const TrainConfig& config) {
  std::ostringstream os;
  for (const auto& f : detail::config_fields()) {
    os << f.key << '=' << f.get(config) << '\n';
  }
  return os.str();
}

}  // namespace sgseg

#endif  // SGSEG_CONFIG_HPP
