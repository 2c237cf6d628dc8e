#ifndef SGSEG_OPS_HPP
#define SGSEG_OPS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "sgseg/tensor.hpp"

namespace sgseg {

namespace detail {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

// c[m][n] += sum_k a[m][k] * b[k][n], all row-major.
inline void gemm_accumulate(const float* a, const float* b, float* c,
                            std::size_t m, std::size_t k, std::size_t n) {
  const auto rows = static_cast<Eigen::Index>(m);
  const auto inner = static_cast<Eigen::Index>(k);
  const auto cols = static_cast<Eigen::Index>(n);
  MatrixMap(c, rows, cols).noalias() +=
      ConstMatrixMap(a, rows, inner) * ConstMatrixMap(b, inner, cols);
}

// c[m][n] = sum_k a[m][k] * b[n][k], i.e. a * b^T.
inline void gemm_transposed(const float* a, const float* b, float* c,
                            std::size_t m, std::size_t k, std::size_t n) {
  const auto rows = static_cast<Eigen::Index>(m);
  const auto inner = static_cast<Eigen::Index>(k);
  const auto cols = static_cast<Eigen::Index>(n);
  MatrixMap(c, rows, cols).noalias() =
      ConstMatrixMap(a, rows, inner) * ConstMatrixMap(b, cols, inner).transpose();
}

// Fixed eight-lane dot product so the reduction order never depends on the
// compiler's vectorization choices.
inline float dot(const float* x, const float* y, std::size_t n) {
  std::array<float, 8> acc{};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += x[i + l] * y[i + l];
  }
  float tail = 0.0f;
  for (; i < n; ++i) tail += x[i] * y[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

struct ConvGeometry {
  std::size_t in_c, in_h, in_w;
  std::size_t out_c, k_h, k_w;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  bool is_pointwise() const {
    return k_h == 1 && k_w == 1 && stride == 1 && pad == 0;
  }
};

inline ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernels,
                                  std::size_t stride, std::size_t pad) {
  require_rank(input, 3, "conv2d input");
  require_rank(kernels, 4, "conv2d kernels");
  require(stride >= 1, "conv2d stride must be positive");
  ConvGeometry g{};
  g.in_c = input.dim(0);
  g.in_h = input.dim(1);
  g.in_w = input.dim(2);
  g.out_c = kernels.dim(0);
  g.k_h = kernels.dim(2);
  g.k_w = kernels.dim(3);
  g.stride = stride;
  g.pad = pad;
  require(kernels.dim(1) == g.in_c,
          "conv2d kernel expects " + std::to_string(kernels.dim(1)) +
              " input channels, input has " + std::to_string(g.in_c));
  require(g.k_h % 2 == 1 && g.k_w % 2 == 1, "conv2d kernel size must be odd");
  require(g.in_h + 2 * pad >= g.k_h && g.in_w + 2 * pad >= g.k_w,
          "conv2d kernel larger than padded input");
  g.out_h = (g.in_h + 2 * pad - g.k_h) / stride + 1;
  g.out_w = (g.in_w + 2 * pad - g.k_w) / stride + 1;
  return g;
}

// Rows indexed by (ci, ky, kx), columns by output pixel.
inline std::vector<float> im2col(const Tensor& input, const ConvGeometry& g) {
  const std::size_t cols = g.out_h * g.out_w;
  std::vector<float> col(g.in_c * g.k_h * g.k_w * cols, 0.0f);
  const float* src = input.data();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_c; ++c) {
    const float* plane = src + c * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.k_h; ++ky) {
      for (std::size_t kx = 0; kx < g.k_w; ++kx, ++row) {
        float* dst = col.data() + row * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) -
                          static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          const float* line = plane + static_cast<std::size_t>(iy) * g.in_w;
          float* out = dst + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) -
                            static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.in_w)) {
              out[ox] = line[ix];
            }
          }
        }
      }
    }
  }
  return col;
}

inline void col2im(const std::vector<float>& col, const ConvGeometry& g,
                   Tensor& grad_input) {
  const std::size_t cols = g.out_h * g.out_w;
  float* dst = grad_input.data();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_c; ++c) {
    float* plane = dst + c * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.k_h; ++ky) {
      for (std::size_t kx = 0; kx < g.k_w; ++kx, ++row) {
        const float* src = col.data() + row * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) -
                          static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          float* line = plane + static_cast<std::size_t>(iy) * g.in_w;
          const float* in = src + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) -
                            static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.in_w)) line[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation with zero padding.
/// input [C_in,H,W], kernels [C_out,C_in,kH,kW], bias [C_out].
inline Tensor conv2d(const Tensor& input, const Tensor& kernels,
                     std::span<const float> bias, std::size_t stride = 1,
                     std::size_t pad = 0) {
  const auto g = detail::conv_geometry(input, kernels, stride, pad);
  detail::require(bias.size() == g.out_c, "conv2d bias length mismatch");
  const std::size_t cols = g.out_h * g.out_w;
  Tensor out({g.out_c, g.out_h, g.out_w});
  float* o = out.data();
  for (std::size_t co = 0; co < g.out_c; ++co) {
    std::fill(o + co * cols, o + (co + 1) * cols, bias[co]);
  }
  const std::size_t depth = g.in_c * g.k_h * g.k_w;
  if (g.is_pointwise()) {
    detail::gemm_accumulate(kernels.data(), input.data(), o, g.out_c, depth,
                            cols);
  } else {
    const auto col = detail::im2col(input, g);
    detail::gemm_accumulate(kernels.data(), col.data(), o, g.out_c, depth,
                            cols);
  }
  SGSEG_CHECK_FINITE(out);
  return out;
}

struct ConvGrads {
  Tensor input;
  Tensor kernels;
  std::vector<float> bias;
};

/// Gradients of conv2d contracted with `upstream`.
inline ConvGrads conv2d_backward(const Tensor& upstream, const Tensor& input,
                                 const Tensor& kernels, std::size_t stride = 1,
                                 std::size_t pad = 0,
                                 bool need_input_grad = true) {
  const auto g = detail::conv_geometry(input, kernels, stride, pad);
  detail::require(upstream.shape() == Shape({g.out_c, g.out_h, g.out_w}),
                  "conv2d_backward upstream shape " +
                      shape_string(upstream.shape()) +
                      " inconsistent with forward");
  const std::size_t cols = g.out_h * g.out_w;
  const std::size_t depth = g.in_c * g.k_h * g.k_w;

  ConvGrads grads{Tensor(input.shape()), Tensor(kernels.shape()),
                  std::vector<float>(g.out_c, 0.0f)};
  const float* up = upstream.data();
  for (std::size_t co = 0; co < g.out_c; ++co) {
    float s = 0.0f;
    for (std::size_t p = 0; p < cols; ++p) s += up[co * cols + p];
    grads.bias[co] = s;
  }

  std::vector<float> col_storage;
  const float* col = input.data();
  if (!g.is_pointwise()) {
    col_storage = detail::im2col(input, g);
    col = col_storage.data();
  }
  detail::gemm_transposed(up, col, grads.kernels.data(), g.out_c, cols, depth);

  if (need_input_grad) {
    // grad_col = kernels^T * upstream
    const auto kt = detail::ConstMatrixMap(kernels.data(),
                                           static_cast<Eigen::Index>(g.out_c),
                                           static_cast<Eigen::Index>(depth))
                        .transpose();
    const auto upm = detail::ConstMatrixMap(up, static_cast<Eigen::Index>(g.out_c),
                                            static_cast<Eigen::Index>(cols));
    if (g.is_pointwise()) {
      detail::MatrixMap(grads.input.data(), static_cast<Eigen::Index>(depth),
                        static_cast<Eigen::Index>(cols))
          .noalias() = kt * upm;
    } else {
      std::vector<float> grad_col(depth * cols);
      detail::MatrixMap(grad_col.data(), static_cast<Eigen::Index>(depth),
                        static_cast<Eigen::Index>(cols))
          .noalias() = kt * upm;
      detail::col2im(grad_col, g, grads.input);
    }
  }
  return grads;
}

inline Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
  return out;
}

inline Tensor relu_backward(const Tensor& upstream, const Tensor& x) {
  detail::require(upstream.shape() == x.shape(),
                  "relu_backward shape mismatch");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] > 0.0f ? upstream[i] : 0.0f;
  }
  return out;
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

inline Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
  return out;
}

/// Per-pixel softmax across channels of a [L,H,W] tensor.
inline Tensor softmax_channels(const Tensor& x) {
  detail::require_rank(x, 3, "softmax_channels input");
  const std::size_t channels = x.dim(0);
  const std::size_t plane = x.dim(1) * x.dim(2);
  Tensor out(x.shape());
  for (std::size_t p = 0; p < plane; ++p) {
    float peak = x[p];
    for (std::size_t c = 1; c < channels; ++c) {
      peak = std::max(peak, x[c * plane + p]);
    }
    float total = 0.0f;
    for (std::size_t c = 0; c < channels; ++c) {
      const float e = std::exp(x[c * plane + p] - peak);
      out[c * plane + p] = e;
      total += e;
    }
    const float inv = 1.0f / total;
    for (std::size_t c = 0; c < channels; ++c) out[c * plane + p] *= inv;
  }
  return out;
}

inline std::vector<float> global_avg_pool(const Tensor& x) {
  detail::require_rank(x, 3, "global_avg_pool input");
  std::vector<float> out(x.dim(0));
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    double s = 0.0;
    for (float v : x.channel(c)) s += v;
    out[c] = static_cast<float>(s / static_cast<double>(x.channel(c).size()));
  }
  return out;
}

/// Bilinear resize with half-pixel centers (align_corners = false), edge
/// samples clamped.
inline Tensor resize_bilinear(const Tensor& x, std::size_t out_h,
                              std::size_t out_w) {
  detail::require_rank(x, 3, "resize_bilinear input");
  detail::require(out_h >= 1 && out_w >= 1,
                  "resize_bilinear output size must be positive");
  const std::size_t in_h = x.dim(1), in_w = x.dim(2);
  if (in_h == out_h && in_w == out_w) return x;

  struct Tap {
    std::size_t lo, hi;
    float frac;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(src));
      t[i] = {lo, std::min(lo + 1, in - 1),
              static_cast<float>(src - static_cast<double>(lo))};
    }
    return t;
  };
  const auto ty = taps(in_h, out_h);
  const auto tx = taps(in_w, out_w);

  Tensor out({x.dim(0), out_h, out_w});
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    const auto src = x.channel(c);
    auto dst = out.channel(c);
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const float fy = ty[oy].frac;
      const float* r0 = src.data() + ty[oy].lo * in_w;
      const float* r1 = src.data() + ty[oy].hi * in_w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const float fx = tx[ox].frac;
        const float top = r0[tx[ox].lo] * (1.0f - fx) + r0[tx[ox].hi] * fx;
        const float bot = r1[tx[ox].lo] * (1.0f - fx) + r1[tx[ox].hi] * fx;
        dst[oy * out_w + ox] = top * (1.0f - fy) + bot * fy;
      }
    }
  }
  return out;
}

namespace detail {

// Windowed sums over a (2r+1)^2 square clipped at the borders, via an
// integral image. Also reports the in-bounds count when `counts` is given.
inline void window_sums(std::span<const double> src, std::size_t h,
                        std::size_t w, std::size_t r, std::span<double> dst,
                        std::span<double> counts = {}) {
  std::vector<double> integral((h + 1) * (w + 1), 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    double row = 0.0;
    for (std::size_t x = 0; x < w; ++x) {
      row += src[y * w + x];
      integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t y0 = y >= r ? y - r : 0;
    const std::size_t y1 = std::min(h, y + r + 1);
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t x0 = x >= r ? x - r : 0;
      const std::size_t x1 = std::min(w, x + r + 1);
      dst[y * w + x] = integral[y1 * (w + 1) + x1] -
                       integral[y0 * (w + 1) + x1] -
                       integral[y1 * (w + 1) + x0] +
                       integral[y0 * (w + 1) + x0];
      if (!counts.empty()) {
        counts[y * w + x] = static_cast<double>((y1 - y0) * (x1 - x0));
      }
    }
  }
}

// Clipped-window mean of a single plane, in double precision.
inline std::vector<double> box_mean(std::span<const double> src,
                                    std::size_t h, std::size_t w,
                                    std::size_t r) {
  std::vector<double> sums(h * w), counts(h * w);
  window_sums(src, h, w, r, sums, counts);
  for (std::size_t i = 0; i < sums.size(); ++i) sums[i] /= counts[i];
  return sums;
}

}  // namespace detail

/// Mean over the (2r+1)^2 window around each pixel, clipped at the image
/// border and normalized by the in-bounds count.
inline Tensor box_filter(const Tensor& x, std::size_t radius) {
  detail::require_rank(x, 3, "box_filter input");
  const std::size_t h = x.dim(1), w = x.dim(2);
  Tensor out(x.shape());
  std::vector<double> plane(h * w);
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    const auto src = x.channel(c);
    std::copy(src.begin(), src.end(), plane.begin());
    const auto mean = detail::box_mean(plane, h, w, radius);
    auto dst = out.channel(c);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      dst[i] = static_cast<float>(mean[i]);
    }
  }
  return out;
}

}  // namespace sgseg

#endif  // SGSEG_OPS_HPP
