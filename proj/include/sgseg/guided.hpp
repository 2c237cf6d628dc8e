#ifndef SGSEG_GUIDED_HPP
#define SGSEG_GUIDED_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "sgseg/affinity.hpp"
#include "sgseg/ops.hpp"
#include "sgseg/tensor.hpp"

namespace sgseg {

inline constexpr std::size_t kOtsuBins = 256;

struct OtsuResult {
  float threshold = 0.0f;
  Tensor binary;         // 1 where value > threshold
  std::size_t bin = 0;   // last histogram bin of the lower class
  bool degenerate = false;
};

/// Histogram bin of `v` for a 256-bin histogram spanning [lo, hi].
inline std::size_t otsu_bin(float v, float lo, float hi) {
  const double x = (static_cast<double>(v) - lo) /
                   (static_cast<double>(hi) - lo) * kOtsuBins;
  return std::min<std::size_t>(kOtsuBins - 1,
                               static_cast<std::size_t>(std::max(0.0, x)));
}

/// Otsu's method on a 256-bin histogram over [min, max]. The split maximizes
/// between-class variance, compared exactly in integer arithmetic with ties
/// going to the lowest bin. The returned threshold is the largest value in
/// the lower class, so binary == (map > threshold) holds exactly.
inline OtsuResult otsu_threshold(const Tensor& map) {
  detail::require(!map.empty(), "otsu_threshold on empty map");
  OtsuResult out;
  out.binary = Tensor(map.shape());
  const auto [lo_it, hi_it] = std::minmax_element(map.values().begin(),
                                                  map.values().end());
  const float lo = *lo_it, hi = *hi_it;
  detail::require(std::isfinite(lo) && std::isfinite(hi),
                  "otsu_threshold on non-finite map");
  if (!(hi > lo)) {
    out.threshold = lo;
    out.degenerate = true;
    return out;
  }

  std::array<std::int64_t, kOtsuBins> hist{};
  std::vector<std::uint16_t> bins(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    bins[i] = static_cast<std::uint16_t>(otsu_bin(map[i], lo, hi));
    ++hist[bins[i]];
  }
  const auto total = static_cast<std::int64_t>(map.size());
  std::int64_t level_sum = 0;
  for (std::size_t b = 0; b < kOtsuBins; ++b) {
    level_sum += static_cast<std::int64_t>(b) * hist[b];
  }

  // sigma_b^2 = (N s0 - S n0)^2 / (N^2 n0 n1); compare num/den pairs exactly.
  using u128 = unsigned __int128;
  u128 best_num = 0, best_den = 1;
  bool found = false;
  std::int64_t n0 = 0, s0 = 0;
  for (std::size_t t = 0; t + 1 < kOtsuBins; ++t) {
    n0 += hist[t];
    s0 += static_cast<std::int64_t>(t) * hist[t];
    const std::int64_t n1 = total - n0;
    if (n0 == 0 || n1 == 0) continue;
    const __int128 diff = static_cast<__int128>(total) * s0 -
                          static_cast<__int128>(level_sum) * n0;
    const u128 num = static_cast<u128>(diff < 0 ? -diff : diff) *
                     static_cast<u128>(diff < 0 ? -diff : diff);
    const u128 den = static_cast<u128>(n0) * static_cast<u128>(n1);
    if (!found || num * best_den > best_num * den) {
      best_num = num;
      best_den = den;
      out.bin = t;
      found = true;
    }
  }

  float threshold = lo;
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (bins[i] <= out.bin) threshold = std::max(threshold, map[i]);
  }
  out.threshold = threshold;
  for (std::size_t i = 0; i < map.size(); ++i) {
    out.binary[i] = map[i] > threshold ? 1.0f : 0.0f;
  }
  return out;
}

/// Rec. 601 luma of a [3,H,W] image as an [H,W] guide.
inline Tensor luma(const Tensor& image) {
  detail::require_rank(image, 3, "luma input");
  detail::require(image.dim(0) == 3, "luma expects 3 channels");
  const std::size_t h = image.dim(1), w = image.dim(2);
  Tensor out({h, w});
  const auto r = image.channel(0), g = image.channel(1), b = image.channel(2);
  for (std::size_t i = 0; i < h * w; ++i) {
    out[i] = 0.299f * r[i] + 0.587f * g[i] + 0.114f * b[i];
  }
  return out;
}

struct GuidedCoefficients {
  Tensor alpha;
  Tensor beta;
  std::size_t radius = 0;
  double epsilon = 0.0;
};

struct GuidedResult {
  Tensor output;
  GuidedCoefficients coeffs;
};

struct GuidedGrads {
  Tensor alpha;
  Tensor beta;
  Tensor input;
};

// Scalar-guide guided filter with clipped windows. Guide statistics are
// computed once and reused for every input filtered against the same guide.
// Internal arithmetic is double precision.
class GuidedFilter {
 public:
  GuidedFilter(const Tensor& guide, std::size_t radius, double epsilon)
      : h_(guide.rank() == 2 ? guide.dim(0) : 0),
        w_(guide.rank() == 2 ? guide.dim(1) : 0),
        radius_(radius),
        epsilon_(epsilon) {
    detail::require_rank(guide, 2, "guided filter guide");
    detail::require(radius >= 1, "guided filter radius must be >= 1");
    detail::require(radius <= std::min(h_, w_),
                    "guided filter radius " + std::to_string(radius) +
                        " exceeds image size " + shape_string(guide.shape()));
    detail::require(epsilon >= 0.0, "guided filter epsilon must be >= 0");
    const std::size_t n = h_ * w_;
    guide_.assign(guide.values().begin(), guide.values().end());
    counts_.resize(n);
    std::vector<double> sums(n);
    detail::window_sums(guide_, h_, w_, radius_, sums, counts_);
    mean_.resize(n);
    for (std::size_t i = 0; i < n; ++i) mean_[i] = sums[i] / counts_[i];
    std::vector<double> sq(n);
    for (std::size_t i = 0; i < n; ++i) sq[i] = guide_[i] * guide_[i];
    const auto mean_sq = box(sq);
    denom_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double var = std::max(0.0, mean_sq[i] - mean_[i] * mean_[i]);
      denom_[i] = var + epsilon_;
    }
  }

  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }

  GuidedResult apply(const Tensor& input) const {
    check_plane(input, "guided filter input");
    const std::size_t n = h_ * w_;
    std::vector<double> src(input.values().begin(), input.values().end());
    std::vector<double> prod(n);
    for (std::size_t i = 0; i < n; ++i) prod[i] = guide_[i] * src[i];
    const auto mean_in = box(src);
    const auto corr = box(prod);
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = denom_[i] > 0.0 ? (corr[i] - mean_[i] * mean_in[i]) / denom_[i]
                             : 0.0;
      b[i] = mean_in[i] - a[i] * mean_[i];
    }
    const auto alpha = box(a);
    const auto beta = box(b);
    GuidedResult out{Tensor({h_, w_}),
                     {Tensor({h_, w_}), Tensor({h_, w_}), radius_, epsilon_}};
    for (std::size_t i = 0; i < n; ++i) {
      out.coeffs.alpha[i] = static_cast<float>(alpha[i]);
      out.coeffs.beta[i] = static_cast<float>(beta[i]);
      out.output[i] = static_cast<float>(alpha[i] * guide_[i] + beta[i]);
    }
    SGSEG_CHECK_FINITE(out.output);
    return out;
  }

  /// Adds the gradients of <upstream, G> into `acc`: the coefficient
  /// gradients dalpha_p += I_p up_p and dbeta_p += up_p, and the input
  /// gradient K^T up with the kernel K(I) held fixed.
  void accumulate_backward(const Tensor& upstream, GuidedGrads& acc) const {
    check_plane(upstream, "guided filter upstream");
    const std::size_t n = h_ * w_;
    for (Tensor* t : {&acc.alpha, &acc.beta, &acc.input}) {
      if (t->empty()) *t = Tensor({h_, w_});
    }
    std::vector<double> d_alpha(n), d_beta(n);
    for (std::size_t i = 0; i < n; ++i) {
      d_alpha[i] = guide_[i] * upstream[i];
      d_beta[i] = upstream[i];
      acc.alpha[i] += static_cast<float>(d_alpha[i]);
      acc.beta[i] += static_cast<float>(d_beta[i]);
    }
    const auto d_a = box_transpose(d_alpha);
    const auto d_b = box_transpose(d_beta);
    std::vector<double> d_mean_in(n), d_corr(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double da = d_a[i] - mean_[i] * d_b[i];
      const double inv = denom_[i] > 0.0 ? 1.0 / denom_[i] : 0.0;
      d_corr[i] = da * inv;
      d_mean_in[i] = d_b[i] - mean_[i] * da * inv;
    }
    const auto from_mean = box_transpose(d_mean_in);
    const auto from_corr = box_transpose(d_corr);
    for (std::size_t i = 0; i < n; ++i) {
      acc.input[i] += static_cast<float>(from_mean[i] + guide_[i] * from_corr[i]);
    }
  }

 private:
  void check_plane(const Tensor& t, const char* what) const {
    detail::require(t.shape() == Shape({h_, w_}),
                    std::string(what) + " shape " + shape_string(t.shape()) +
                        " does not match guide " + std::to_string(h_) + "x" +
                        std::to_string(w_));
  }

  std::vector<double> box(const std::vector<double>& x) const {
    std::vector<double> s(x.size());
    detail::window_sums(x, h_, w_, radius_, s);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] /= counts_[i];
    return s;
  }

  // Transpose of the clipped box mean: window sums of y / count.
  std::vector<double> box_transpose(const std::vector<double>& y) const {
    std::vector<double> scaled(y.size()), s(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) scaled[i] = y[i] / counts_[i];
    detail::window_sums(scaled, h_, w_, radius_, s);
    return s;
  }

  std::size_t h_, w_, radius_;
  double epsilon_;
  std::vector<double> guide_, counts_, mean_, denom_;
};

inline GuidedResult guided_filter(const Tensor& guide, const Tensor& input,
                                  std::size_t radius, double epsilon) {
  return GuidedFilter(guide, radius, epsilon).apply(input);
}

/// Fresh (non-accumulated) gradients of <upstream, G>. `input` and `coeffs`
/// only fix the shapes and hyperparameters; the filter is linear in its input.
inline GuidedGrads guided_filter_backward(const Tensor& upstream,
                                          const Tensor& guide,
                                          const Tensor& input,
                                          const GuidedCoefficients& coeffs) {
  detail::require(input.shape() == guide.shape(),
                  "guided_filter_backward input/guide shape mismatch");
  GuidedGrads g;
  GuidedFilter(guide, coeffs.radius, coeffs.epsilon)
      .accumulate_backward(upstream, g);
  return g;
}

struct SelfGuidedResult {
  LocalizationMaps refined;          // continuous maps at image resolution
  std::vector<float> thresholds;     // per-class Otsu threshold on R
  std::vector<bool> class_degenerate;
  bool degenerate = false;           // every class had an empty binary map
};

/// Upsamples each map to image resolution, binarizes it with Otsu, then
/// applies the luma-guided filter `iterations` times to the continuous result.
/// `on_iteration(i, maps)` observes the maps after iteration i (1-based).
inline SelfGuidedResult self_guided_refine(
    const Tensor& image, const LocalizationMaps& r, std::size_t iterations,
    std::size_t radius, double epsilon,
    const std::function<void(std::size_t, const LocalizationMaps&)>&
        on_iteration = {}) {
  detail::require(iterations >= 1, "self-guided refinement needs >= 1 iteration");
  detail::require_rank(image, 3, "self_guided_refine image");
  const std::size_t h = image.dim(1), w = image.dim(2);
  const GuidedFilter filter(luma(image), radius, epsilon);
  const Tensor up = resize_bilinear(r.maps, h, w);

  SelfGuidedResult out;
  out.refined = {Tensor({r.count(), h, w}), r.class_ids};
  out.degenerate = true;
  std::vector<Tensor> current(r.count());
  for (std::size_t c = 0; c < r.count(); ++c) {
    const auto src = up.channel(c);
    Tensor plane({h, w}, std::vector<float>(src.begin(), src.end()));
    auto otsu = otsu_threshold(plane);
    out.thresholds.push_back(otsu.threshold);
    out.class_degenerate.push_back(otsu.degenerate);
    if (!otsu.degenerate) out.degenerate = false;
    current[c] = std::move(otsu.binary);
  }
  for (std::size_t it = 1; it <= iterations; ++it) {
    for (std::size_t c = 0; c < r.count(); ++c) {
      if (!out.class_degenerate[c]) {
        current[c] = filter.apply(current[c]).output;
      }
      std::copy(current[c].values().begin(), current[c].values().end(),
                out.refined.maps.channel(c).begin());
    }
    if (on_iteration) on_iteration(it, out.refined);
  }
  return out;
}

}  // namespace sgseg

#endif  // SGSEG_GUIDED_HPP
