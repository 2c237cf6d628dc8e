#ifndef SGSEG_PSEUDOLABEL_HPP
#define SGSEG_PSEUDOLABEL_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "sgseg/affinity.hpp"
#include "sgseg/guided.hpp"
#include "sgseg/ops.hpp"
#include "sgseg/tensor.hpp"

namespace sgseg {

// Per-pixel class indices, 0 = background.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::int32_t fill = 0)
      : height(h), width(w), labels(h * w, fill) {}

  std::int32_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::int32_t at(std::size_t y, std::size_t x) const {
    return labels[y * width + x];
  }
  std::size_t size() const { return labels.size(); }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

struct PseudoLabels {
  LabelMap labels;
  float threshold = 0.0f;
  bool degenerate = false;  // constant max-map: everything is background
};

/// Pixels take the argmax class among maps exceeding `threshold`, else
/// background. Ties go to the lower class index.
inline LabelMap assign_with_threshold(const LocalizationMaps& g,
                                      float threshold) {
  const std::size_t h = g.maps.dim(1), w = g.maps.dim(2), n = h * w;
  LabelMap out(h, w);
  for (std::size_t p = 0; p < n; ++p) {
    float best = threshold;
    std::int32_t label = 0;
    for (std::size_t c = 0; c < g.count(); ++c) {
      const float v = g.maps[c * n + p];
      if (v > best) {
        best = v;
        label = static_cast<std::int32_t>(g.class_ids[c]);
      }
    }
    out.labels[p] = label;
  }
  return out;
}

/// One foreground/background threshold per image from Otsu on the per-pixel
/// maximum over class maps, then argmax among the classes above it.
inline PseudoLabels assign_pseudo_labels(const LocalizationMaps& g) {
  detail::require_rank(g.maps, 3, "pseudo-label maps");
  detail::require(g.count() == g.maps.dim(0) && g.count() >= 1,
                  "pseudo-label maps and class ids disagree");
  for (std::size_t c = 1; c < g.count(); ++c) {
    detail::require(g.class_ids[c - 1] < g.class_ids[c],
                    "class ids must be strictly ascending");
  }
  const std::size_t h = g.maps.dim(1), w = g.maps.dim(2), n = h * w;
  Tensor peak({h, w});
  for (std::size_t p = 0; p < n; ++p) {
    float m = g.maps[p];
    for (std::size_t c = 1; c < g.count(); ++c) m = std::max(m, g.maps[c * n + p]);
    peak[p] = m;
  }
  const auto otsu = otsu_threshold(peak);
  PseudoLabels out;
  out.threshold = otsu.threshold;
  if (otsu.degenerate) {
    out.labels = LabelMap(h, w);
    out.degenerate = true;
    return out;
  }
  out.labels = assign_with_threshold(g, otsu.threshold);
  return out;
}

/// Nearest-neighbor label resampling; source pixel floor((i + 0.5) * in / out).
inline LabelMap downsample_nearest(const LabelMap& in, std::size_t out_h,
                                   std::size_t out_w) {
  LabelMap out(out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = (2 * y + 1) * in.height / (2 * out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = (2 * x + 1) * in.width / (2 * out_w);
      out.at(y, x) = in.at(sy, sx);
    }
  }
  return out;
}

inline LabelMap crop(const LabelMap& in, std::size_t y0, std::size_t x0,
                     std::size_t h, std::size_t w) {
  LabelMap out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) out.at(y, x) = in.at(y0 + y, x0 + x);
  }
  return out;
}

struct SegmentationLoss {
  double loss = 0.0;  // mean over pixels
  Tensor d_logits;
};

/// Mean per-pixel softmax cross-entropy against `target`, which must already
/// match the logit resolution.
inline SegmentationLoss segmentation_loss(const Tensor& logits,
                                          const LabelMap& target) {
  detail::require_rank(logits, 3, "segmentation logits");
  detail::require(target.height == logits.dim(1) && target.width == logits.dim(2),
                  "pseudo label " + std::to_string(target.height) + "x" +
                      std::to_string(target.width) +
                      " does not match logits " + shape_string(logits.shape()));
  const std::size_t classes = logits.dim(0);
  const std::size_t n = target.size();
  SegmentationLoss out{0.0, softmax_channels(logits)};
  const float inv_n = 1.0f / static_cast<float>(n);
  for (std::size_t p = 0; p < n; ++p) {
    const auto label = static_cast<std::size_t>(target.labels[p]);
    detail::require(label < classes, "pseudo label class out of range");
    const float prob = out.d_logits[label * n + p];
    out.loss -= std::log(std::max(static_cast<double>(prob), 1e-30));
    out.d_logits[label * n + p] -= 1.0f;
  }
  for (float& v : out.d_logits.values()) v *= inv_n;
  out.loss /= static_cast<double>(n);
  return out;
}

/// Per-pixel argmax over channels.
inline LabelMap argmax_labels(const Tensor& scores) {
  detail::require_rank(scores, 3, "argmax input");
  const std::size_t h = scores.dim(1), w = scores.dim(2), n = h * w;
  LabelMap out(h, w);
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.dim(0); ++c) {
      if (scores[c * n + p] > scores[best * n + p]) best = c;
    }
    out.labels[p] = static_cast<std::int32_t>(best);
  }
  return out;
}

struct IoUReport {
  std::vector<double> per_class_iou;
  std::vector<bool> defined;  // false when the class is absent in both maps
  double miou = 0.0;
};

// Dataset-level accumulator; rows are truth, columns prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes)
      : classes_(classes), counts_(classes * classes, 0) {}

  void add(const LabelMap& pred, const LabelMap& truth) {
    detail::require(pred.height == truth.height && pred.width == truth.width,
                    "mIoU: prediction and truth shapes differ");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const auto t = static_cast<std::size_t>(truth.labels[i]);
      const auto p = static_cast<std::size_t>(pred.labels[i]);
      detail::require(t < classes_ && p < classes_, "mIoU: label out of range");
      ++counts_[t * classes_ + p];
    }
  }

  void merge(const ConfusionMatrix& other) {
    detail::require(other.classes_ == classes_, "confusion size mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  std::uint64_t count(std::size_t truth, std::size_t pred) const {
    return counts_[truth * classes_ + pred];
  }

  IoUReport report() const {
    IoUReport r;
    r.per_class_iou.assign(classes_, 0.0);
    r.defined.assign(classes_, false);
    double total = 0.0;
    std::size_t defined = 0;
    for (std::size_t c = 0; c < classes_; ++c) {
      std::uint64_t row = 0, col = 0;
      for (std::size_t k = 0; k < classes_; ++k) {
        row += count(c, k);
        col += count(k, c);
      }
      const std::uint64_t inter = count(c, c);
      const std::uint64_t uni = row + col - inter;
      if (uni == 0) continue;
      r.defined[c] = true;
      r.per_class_iou[c] = static_cast<double>(inter) / static_cast<double>(uni);
      total += r.per_class_iou[c];
      ++defined;
    }
    r.miou = defined ? total / static_cast<double>(defined) : 0.0;
    return r;
  }

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

inline IoUReport compute_miou(const LabelMap& pred, const LabelMap& truth,
                              std::size_t num_classes) {
  ConfusionMatrix cm(num_classes);
  cm.add(pred, truth);
  return cm.report();
}

}  // namespace sgseg

#endif  // SGSEG_PSEUDOLABEL_HPP
