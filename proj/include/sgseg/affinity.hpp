#ifndef SGSEG_AFFINITY_HPP
#define SGSEG_AFFINITY_HPP

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "sgseg/micronet.hpp"
#include "sgseg/ops.hpp"
#include "sgseg/tensor.hpp"

namespace sgseg {

// Soft response maps for the present foreground classes, [|Z|, h, w], with
// class ids in ascending order.
struct LocalizationMaps {
  Tensor maps;
  std::vector<std::size_t> class_ids;

  std::size_t count() const { return class_ids.size(); }
};

// Square row-major matrix over the pixels of an h x w grid (pixel index
// y * w + x).
struct PixelMatrix {
  std::size_t n = 0;
  std::vector<float> values;

  explicit PixelMatrix(std::size_t size = 0, float fill = 0.0f)
      : n(size), values(size * size, fill) {}

  float& at(std::size_t p, std::size_t q) { return values[p * n + q]; }
  float at(std::size_t p, std::size_t q) const { return values[p * n + q]; }
  std::span<const float> row(std::size_t p) const {
    return std::span<const float>(values).subspan(p * n, n);
  }
};

struct AffinityMatrix {
  PixelMatrix W;  // exp(-||F_p - F_q||)
  PixelMatrix T;  // D^{-1} W, row-stochastic
  std::vector<float> degree;
};

struct ColorSimilarity {
  PixelMatrix M;
  bool degenerate = false;  // constant image: M is all ones
};

/// Keeps the maps of the present classes and resizes them to (h, w).
inline LocalizationMaps select_present_maps(const Tensor& loc_maps,
                                            const LabelSet& labels,
                                            std::size_t h, std::size_t w) {
  detail::require_rank(loc_maps, 3, "localization maps");
  detail::require(!labels.present.empty(),
                  "select_present_maps needs a non-empty class set");
  std::vector<std::size_t> ids = labels.present;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  const std::size_t plane = loc_maps.dim(1) * loc_maps.dim(2);
  Tensor picked({ids.size(), loc_maps.dim(1), loc_maps.dim(2)});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::require(ids[i] >= 1 && ids[i] <= loc_maps.dim(0),
                    "class " + std::to_string(ids[i]) + " has no map");
    const auto src = loc_maps.channel(ids[i] - 1);
    std::copy(src.begin(), src.end(), picked.data() + i * plane);
  }
  return {resize_bilinear(picked, h, w), std::move(ids)};
}

struct AggregatedFeatures {
  Tensor resized;   // tap features at (h, w)
  Tensor features;  // F, [k, h, w]
};

inline AggregatedFeatures aggregate_features(const Tensor& tap,
                                             const Tensor& agg_w,
                                             const Tensor& agg_b,
                                             std::size_t h, std::size_t w) {
  AggregatedFeatures out;
  out.resized = resize_bilinear(tap, h, w);
  out.features = conv2d(out.resized, agg_w, agg_b.values());
  return out;
}

/// W_pq = exp(-||F_p - F_q||_2) over all pixel pairs, and its row-normalized
/// transition matrix.
inline AffinityMatrix build_affinity(const Tensor& features) {
  detail::require_rank(features, 3, "affinity features");
  const std::size_t k = features.dim(0);
  const std::size_t n = features.dim(1) * features.dim(2);
  AffinityMatrix a{PixelMatrix(n), PixelMatrix(n), std::vector<float>(n)};
  const float* f = features.data();
  for (std::size_t p = 0; p < n; ++p) {
    a.W.at(p, p) = 1.0f;
    for (std::size_t q = p + 1; q < n; ++q) {
      float d2 = 0.0f;
      for (std::size_t c = 0; c < k; ++c) {
        const float diff = f[c * n + p] - f[c * n + q];
        d2 += diff * diff;
      }
      const float v = std::exp(-std::sqrt(d2));
      a.W.at(p, q) = v;
      a.W.at(q, p) = v;
    }
  }
  for (std::size_t p = 0; p < n; ++p) {
    double s = 0.0;
    for (float v : a.W.row(p)) s += v;
    a.degree[p] = static_cast<float>(s);
    const double inv = 1.0 / s;
    for (std::size_t q = 0; q < n; ++q) {
      a.T.at(p, q) = static_cast<float>(a.W.at(p, q) * inv);
    }
  }
  return a;
}

/// M_pq = 1 - ||I_p - I_q|| / max_pq ||I_p - I_q|| over the image resized to
/// (h, w).
inline ColorSimilarity color_similarity(const Tensor& image, std::size_t h,
                                        std::size_t w) {
  detail::require_rank(image, 3, "color_similarity image");
  const Tensor small = resize_bilinear(image, h, w);
  const std::size_t channels = small.dim(0);
  const std::size_t n = h * w;
  ColorSimilarity out{PixelMatrix(n), false};
  const float* px = small.data();
  float peak = 0.0f;
  for (std::size_t p = 0; p < n; ++p) {
    out.M.at(p, p) = 0.0f;
    for (std::size_t q = p + 1; q < n; ++q) {
      float d2 = 0.0f;
      for (std::size_t c = 0; c < channels; ++c) {
        const float diff = px[c * n + p] - px[c * n + q];
        d2 += diff * diff;
      }
      const float d = std::sqrt(d2);
      out.M.at(p, q) = d;
      out.M.at(q, p) = d;
      peak = std::max(peak, d);
    }
  }
  if (peak <= 0.0f) {
    std::fill(out.M.values.begin(), out.M.values.end(), 1.0f);
    out.degenerate = true;
    return out;
  }
  for (float& v : out.M.values) v = 1.0f - v / peak;
  return out;
}

struct AffinityLoss {
  double loss = 0.0;
  PixelMatrix d_transition;  // sign(T - M)
};

/// Elementwise L1 distance between the transition matrix and the color
/// similarity matrix.
inline AffinityLoss affinity_loss(const PixelMatrix& T, const PixelMatrix& M) {
  detail::require(T.n == M.n, "affinity_loss matrix size mismatch: " +
                                  std::to_string(T.n) + " vs " +
                                  std::to_string(M.n));
  AffinityLoss out{0.0, PixelMatrix(T.n)};
  for (std::size_t i = 0; i < T.values.size(); ++i) {
    const float diff = T.values[i] - M.values[i];
    out.loss += std::fabs(static_cast<double>(diff));
    out.d_transition.values[i] = diff > 0.0f ? 1.0f : (diff < 0.0f ? -1.0f : 0.0f);
  }
  return out;
}

/// Chains a gradient on T back through row normalization and the
/// exponential distance kernel to the aggregated features F.
inline Tensor affinity_backward(const AffinityMatrix& a, const Tensor& features,
                                const PixelMatrix& d_transition) {
  const std::size_t n = a.T.n;
  const std::size_t k = features.dim(0);
  detail::require(features.dim(1) * features.dim(2) == n &&
                      d_transition.n == n,
                  "affinity_backward size mismatch");
  // dL/dW_pq = (g_pq - sum_q' g_pq' T_pq') / D_p, then dL/dd_pq = -W_pq dL/dW_pq.
  PixelMatrix d_dist(n);
  for (std::size_t p = 0; p < n; ++p) {
    const float* g = d_transition.values.data() + p * n;
    const float* t = a.T.values.data() + p * n;
    const float inner = detail::dot(g, t, n);
    const float inv_deg = 1.0f / a.degree[p];
    for (std::size_t q = 0; q < n; ++q) {
      d_dist.at(p, q) = -a.W.at(p, q) * (g[q] - inner) * inv_deg;
    }
  }
  Tensor d_features(features.shape());
  const float* f = features.data();
  float* df = d_features.data();
  std::vector<float> diff(k);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = p + 1; q < n; ++q) {
      const float coeff = d_dist.at(p, q) + d_dist.at(q, p);
      if (coeff == 0.0f) continue;
      float d2 = 0.0f;
      for (std::size_t c = 0; c < k; ++c) {
        diff[c] = f[c * n + p] - f[c * n + q];
        d2 += diff[c] * diff[c];
      }
      // The distance is not differentiable at zero; use the zero subgradient.
      if (d2 <= 0.0f) continue;
      const float s = coeff / std::sqrt(d2);
      for (std::size_t c = 0; c < k; ++c) {
        df[c * n + p] += s * diff[c];
        df[c * n + q] -= s * diff[c];
      }
    }
  }
  return d_features;
}

struct AffinityObjective {
  double loss = 0.0;
  Tensor d_agg_w, d_agg_b;
};

/// Affinity loss for one image and its gradient on the aggregation conv.
/// Nothing flows below the tap.
inline AffinityObjective affinity_objective(const Tensor& tap,
                                            const MicroNetParams& params,
                                            const ColorSimilarity& color,
                                            std::size_t h, std::size_t w) {
  const auto agg = aggregate_features(tap, params.agg_w, params.agg_b, h, w);
  const auto a = build_affinity(agg.features);
  auto l = affinity_loss(a.T, color.M);
  const Tensor d_f = affinity_backward(a, agg.features, l.d_transition);
  auto g = conv2d_backward(d_f, agg.resized, params.agg_w, 1, 0,
                           /*need_input_grad=*/false);
  AffinityObjective out;
  out.loss = l.loss;
  out.d_agg_w = std::move(g.kernels);
  const std::size_t k = g.bias.size();
  out.d_agg_b = Tensor({k}, std::move(g.bias));
  return out;
}

/// One random-walk step R = T A' with A' the [hw, |Z|] reshaping of A.
inline LocalizationMaps random_walk_refine(const PixelMatrix& T,
                                           const LocalizationMaps& a) {
  const std::size_t n = T.n;
  detail::require(a.maps.dim(1) * a.maps.dim(2) == n,
                  "random walk: map grid does not match transition size");
  LocalizationMaps r{Tensor(a.maps.shape()), a.class_ids};
  for (std::size_t c = 0; c < a.count(); ++c) {
    const float* src = a.maps.data() + c * n;
    float* dst = r.maps.data() + c * n;
    for (std::size_t p = 0; p < n; ++p) {
      dst[p] = detail::dot(T.values.data() + p * n, src, n);
    }
  }
  return r;
}

}  // namespace sgseg

#endif  // SGSEG_AFFINITY_HPP
