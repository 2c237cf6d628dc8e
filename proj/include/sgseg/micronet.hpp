#ifndef SGSEG_MICRONET_HPP
#define SGSEG_MICRONET_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sgseg/ops.hpp"
#include "sgseg/tensor.hpp"

namespace sgseg {

// Image-level annotation: L classes (0 is background) and the foreground
// classes present in the image.
struct LabelSet {
  std::size_t num_classes = 0;
  std::vector<std::size_t> present;

  void validate() const {
    detail::require(num_classes >= 2, "label set needs at least 2 classes");
    detail::require(!present.empty(), "label set has no present classes");
    for (std::size_t c : present) {
      detail::require(c >= 1 && c < num_classes,
                      "present class " + std::to_string(c) +
                          " outside foreground range 1.." +
                          std::to_string(num_classes - 1));
    }
  }

  bool contains(std::size_t c) const {
    return std::find(present.begin(), present.end(), c) != present.end();
  }
};

enum class ParamGroup { backbone, seg_head, loc_head, aggregation };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::seg_head: return "seg_head";
    case ParamGroup::loc_head: return "loc_head";
    case ParamGroup::aggregation: return "aggregation";
  }
  return "?";
}

// Four 3x3 conv layers (x4 downsampling), a 1x1 segmentation head with L
// outputs, a 1x1 localization head mapping the L segmentation maps to L-1
// class maps, and the 1x1 feature-aggregation conv used for affinities.
struct MicroNetParams {
  static constexpr std::size_t kTapChannels = 16;

  std::size_t num_classes = 0;
  std::size_t agg_channels = 0;

  Tensor conv1_w, conv1_b;
  Tensor conv2_w, conv2_b;
  Tensor conv3_w, conv3_b;
  Tensor conv4_w, conv4_b;
  Tensor seg_w, seg_b;
  Tensor loc_w, loc_b;
  Tensor agg_w, agg_b;

  MicroNetParams() = default;

  // Zero-valued parameters with the right shapes.
  MicroNetParams(std::size_t classes, std::size_t k)
      : num_classes(classes),
        agg_channels(k),
        conv1_w({16, 3, 3, 3}), conv1_b({16}),
        conv2_w({32, 16, 3, 3}), conv2_b({32}),
        conv3_w({64, 32, 3, 3}), conv3_b({64}),
        conv4_w({64, 64, 3, 3}), conv4_b({64}),
        seg_w({classes, 64, 1, 1}), seg_b({classes}),
        loc_w({classes - 1, classes, 1, 1}), loc_b({classes - 1}),
        agg_w({k, kTapChannels, 1, 1}), agg_b({k}) {
    detail::require(classes >= 2, "micronet needs at least 2 classes");
    detail::require(k >= 1, "aggregation needs at least one channel");
  }

  template <typename Self, typename Fn>
  static void visit_impl(Self& self, Fn&& fn) {
    fn("conv1.weight", ParamGroup::backbone, self.conv1_w);
    fn("conv1.bias", ParamGroup::backbone, self.conv1_b);
    fn("conv2.weight", ParamGroup::backbone, self.conv2_w);
    fn("conv2.bias", ParamGroup::backbone, self.conv2_b);
    fn("conv3.weight", ParamGroup::backbone, self.conv3_w);
    fn("conv3.bias", ParamGroup::backbone, self.conv3_b);
    fn("conv4.weight", ParamGroup::backbone, self.conv4_w);
    fn("conv4.bias", ParamGroup::backbone, self.conv4_b);
    fn("seg_head.weight", ParamGroup::seg_head, self.seg_w);
    fn("seg_head.bias", ParamGroup::seg_head, self.seg_b);
    fn("loc_head.weight", ParamGroup::loc_head, self.loc_w);
    fn("loc_head.bias", ParamGroup::loc_head, self.loc_b);
    fn("aggregation.weight", ParamGroup::aggregation, self.agg_w);
    fn("aggregation.bias", ParamGroup::aggregation, self.agg_b);
  }

  template <typename Fn>
  void visit(Fn&& fn) { visit_impl(*this, fn); }
  template <typename Fn>
  void visit(Fn&& fn) const { visit_impl(*this, fn); }

  // Pairwise walk over two parameter sets with identical layout.
  template <typename Fn>
  void visit_with(const MicroNetParams& other, Fn&& fn) {
    std::vector<const Tensor*> theirs;
    other.visit([&](const std::string&, ParamGroup, const Tensor& t) {
      theirs.push_back(&t);
    });
    std::size_t i = 0;
    visit([&](const std::string& name, ParamGroup g, Tensor& t) {
      fn(name, g, t, *theirs.at(i++));
    });
  }

  void add(const MicroNetParams& other) {
    visit_with(other, [](const std::string&, ParamGroup, Tensor& a,
                         const Tensor& b) {
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    });
  }

  void scale(float s) {
    visit([s](const std::string&, ParamGroup, Tensor& t) {
      for (float& v : t.values()) v *= s;
    });
  }

  friend bool operator==(const MicroNetParams& a, const MicroNetParams& b) {
    bool same = a.num_classes == b.num_classes &&
                a.agg_channels == b.agg_channels;
    std::vector<const Tensor*> ta, tb;
    a.visit([&](const std::string&, ParamGroup, const Tensor& t) { ta.push_back(&t); });
    b.visit([&](const std::string&, ParamGroup, const Tensor& t) { tb.push_back(&t); });
    for (std::size_t i = 0; same && i < ta.size(); ++i) same = *ta[i] == *tb[i];
    return same;
  }
};

// He-normal backbone, N(0, head_std^2) segmentation and localization heads,
// N(0, agg_std^2) aggregation conv (head_std when unset), zero biases.
inline MicroNetParams init_micronet(std::size_t classes, std::size_t k,
                                    std::uint64_t seed,
                                    float head_std = 0.01f,
                                    std::optional<float> agg_std = std::nullopt) {
  MicroNetParams p(classes, k);
  std::mt19937_64 rng(seed);
  p.visit([&](const std::string& name, ParamGroup g, Tensor& t) {
    if (t.rank() == 1) return;
    float std_dev = head_std;
    if (g == ParamGroup::aggregation) std_dev = agg_std.value_or(head_std);
    if (g == ParamGroup::backbone) {
      const auto fan_in = static_cast<float>(t.dim(1) * t.dim(2) * t.dim(3));
      std_dev = std::sqrt(2.0f / fan_in);
    }
    std::normal_distribution<float> dist(0.0f, std_dev);
    for (float& v : t.values()) v = dist(rng);
    (void)name;
  });
  return p;
}

struct ForwardCache {
  Tensor image;
  Tensor features;  // conv1 + relu, the aggregation tap
  Tensor h2, h3, h4;
  Tensor seg_logits;          // [L, H/4, W/4]
  Tensor loc_maps;            // [L-1, H/4, W/4]
  std::vector<float> scores;  // sigmoid(GAP(loc_maps)), one per foreground class
};

inline ForwardCache micronet_forward(const Tensor& image,
                                     const MicroNetParams& p) {
  detail::require_rank(image, 3, "micronet image");
  detail::require(image.dim(0) == 3, "micronet expects 3-channel images");
  detail::require(image.dim(1) % 4 == 0 && image.dim(2) % 4 == 0,
                  "image dims " + shape_string(image.shape()) +
                      " must be divisible by 4");
  ForwardCache c;
  c.image = image;
  c.features = relu(conv2d(image, p.conv1_w, p.conv1_b.values(), 1, 1));
  c.h2 = relu(conv2d(c.features, p.conv2_w, p.conv2_b.values(), 2, 1));
  c.h3 = relu(conv2d(c.h2, p.conv3_w, p.conv3_b.values(), 2, 1));
  c.h4 = relu(conv2d(c.h3, p.conv4_w, p.conv4_b.values(), 1, 1));
  c.seg_logits = conv2d(c.h4, p.seg_w, p.seg_b.values());
  c.loc_maps = conv2d(c.seg_logits, p.loc_w, p.loc_b.values());
  c.scores = global_avg_pool(c.loc_maps);
  for (float& s : c.scores) s = sigmoid(s);
  return c;
}

namespace detail {

inline void store_grads(Tensor& w, Tensor& b, ConvGrads& g) {
  w = std::move(g.kernels);
  const std::size_t n = g.bias.size();
  b = Tensor({n}, std::move(g.bias));
}

}  // namespace detail

/// Backpropagates gradients given on the localization maps and/or the
/// segmentation logits (either may be empty). Aggregation gradients are left
/// zero; they come from the affinity objective.
inline MicroNetParams micronet_backward(const ForwardCache& c,
                                        const MicroNetParams& p,
                                        const Tensor& d_loc_maps,
                                        const Tensor& d_seg_logits) {
  MicroNetParams g(p.num_classes, p.agg_channels);
  Tensor d_seg = d_seg_logits.empty() ? Tensor(c.seg_logits.shape())
                                      : d_seg_logits;
  detail::require(d_seg.shape() == c.seg_logits.shape(),
                  "segmentation gradient shape mismatch");
  if (!d_loc_maps.empty()) {
    detail::require(d_loc_maps.shape() == c.loc_maps.shape(),
                    "localization gradient shape mismatch");
    auto lg = conv2d_backward(d_loc_maps, c.seg_logits, p.loc_w);
    for (std::size_t i = 0; i < d_seg.size(); ++i) d_seg[i] += lg.input[i];
    detail::store_grads(g.loc_w, g.loc_b, lg);
  }
  auto sg = conv2d_backward(d_seg, c.h4, p.seg_w);
  detail::store_grads(g.seg_w, g.seg_b, sg);

  auto g4 = conv2d_backward(relu_backward(sg.input, c.h4), c.h3, p.conv4_w, 1, 1);
  detail::store_grads(g.conv4_w, g.conv4_b, g4);
  auto g3 = conv2d_backward(relu_backward(g4.input, c.h3), c.h2, p.conv3_w, 2, 1);
  detail::store_grads(g.conv3_w, g.conv3_b, g3);
  auto g2 = conv2d_backward(relu_backward(g3.input, c.h2), c.features, p.conv2_w, 2, 1);
  detail::store_grads(g.conv2_w, g.conv2_b, g2);
  auto g1 = conv2d_backward(relu_backward(g2.input, c.features), c.image,
                            p.conv1_w, 1, 1, /*need_input_grad=*/false);
  detail::store_grads(g.conv1_w, g.conv1_b, g1);
  return g;
}

struct ClassificationLoss {
  double loss = 0.0;
  std::vector<float> d_scores;
};

/// Multi-label binary cross-entropy over the foreground classes. Scores are
/// clamped to [1e-7, 1 - 1e-7] before the log.
inline ClassificationLoss classification_loss(std::span<const float> scores,
                                              const LabelSet& labels) {
  labels.validate();
  detail::require(scores.size() == labels.num_classes - 1,
                  "expected one score per foreground class");
  constexpr double kEps = 1e-7;
  ClassificationLoss out;
  out.d_scores.resize(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double e = std::clamp(static_cast<double>(scores[i]), kEps, 1.0 - kEps);
    if (labels.contains(i + 1)) {
      out.loss -= std::log(e);
      out.d_scores[i] = static_cast<float>(-1.0 / e);
    } else {
      out.loss -= std::log(1.0 - e);
      out.d_scores[i] = static_cast<float>(1.0 / (1.0 - e));
    }
  }
  return out;
}

/// Gradient on the localization maps implied by d(loss)/d(scores), through
/// the sigmoid and the global average pool.
inline Tensor scores_to_map_grad(const ForwardCache& c,
                                 std::span<const float> d_scores) {
  Tensor d(c.loc_maps.shape());
  const std::size_t plane = c.loc_maps.dim(1) * c.loc_maps.dim(2);
  for (std::size_t k = 0; k < d_scores.size(); ++k) {
    const float e = c.scores[k];
    const float v = d_scores[k] * e * (1.0f - e) / static_cast<float>(plane);
    std::fill(d.channel(k).begin(), d.channel(k).end(), v);
  }
  return d;
}

struct PolySchedule {
  float base_lr = 0.001f;
  std::size_t max_iter = 1;
  float power = 0.9f;

  float lr(std::size_t t) const {
    detail::require(t <= max_iter, "iteration " + std::to_string(t) +
                                       " exceeds max_iter " +
                                       std::to_string(max_iter));
    const double frac = 1.0 - static_cast<double>(t) / static_cast<double>(max_iter);
    return static_cast<float>(base_lr * std::pow(frac, static_cast<double>(power)));
  }
};

struct GroupMask {
  bool backbone = true;
  bool seg_head = true;
  bool loc_head = true;
  bool aggregation = true;

  bool allows(ParamGroup g) const {
    switch (g) {
      case ParamGroup::backbone: return backbone;
      case ParamGroup::seg_head: return seg_head;
      case ParamGroup::loc_head: return loc_head;
      case ParamGroup::aggregation: return aggregation;
    }
    return false;
  }
};

/// Plain SGD with the poly learning-rate policy; groups outside `mask` are
/// left untouched.
inline void sgd_step(MicroNetParams& params, const MicroNetParams& grads,
                     std::size_t t, const PolySchedule& schedule,
                     const GroupMask& mask = {},
                     const std::vector<float>& group_lr_scale = {}) {
  const float lr = schedule.lr(t);
  params.visit_with(grads, [&](const std::string&, ParamGroup g, Tensor& w,
                               const Tensor& dw) {
    if (!mask.allows(g)) return;
    float step = lr;
    const auto gi = static_cast<std::size_t>(g);
    if (gi < group_lr_scale.size()) step *= group_lr_scale[gi];
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= step * dw[i];
  });
}

/// FNV-1a over the raw bytes of every tensor in `group`.
inline std::uint64_t group_checksum(const MicroNetParams& params,
                                    ParamGroup group) {
  std::uint64_t h = 1469598103934665603ull;
  params.visit([&](const std::string&, ParamGroup g, const Tensor& t) {
    if (g != group) return;
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < t.size() * sizeof(float); ++i) {
      h = (h ^ bytes[i]) * 1099511628211ull;
    }
  });
  return h;
}

}  // namespace sgseg

#endif  // SGSEG_MICRONET_HPP
