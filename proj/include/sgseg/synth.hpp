#ifndef SGSEG_SYNTH_HPP
#define SGSEG_SYNTH_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

#include "sgseg/micronet.hpp"
#include "sgseg/pseudolabel.hpp"
#include "sgseg/tensor.hpp"

namespace sgseg {

enum class ShapeKind { circle, square, triangle };

inline constexpr std::size_t kShapeKinds = 3;
inline constexpr std::size_t kHues = 7;
inline constexpr std::size_t kMaxForegroundClasses = kShapeKinds * kHues - 1;

inline constexpr std::array<std::array<float, 3>, kHues> kHuePalette{{
    {0.90f, 0.15f, 0.15f},  // red
    {0.15f, 0.80f, 0.20f},  // green
    {0.25f, 0.45f, 0.95f},  // blue
    {0.95f, 0.85f, 0.15f},  // yellow
    {0.85f, 0.20f, 0.85f},  // magenta
    {0.15f, 0.80f, 0.85f},  // cyan
    {0.95f, 0.55f, 0.10f},  // orange
}};

// Foreground class c is a (shape, hue) pair: shape (c-1) mod 3, hue
// (c-1) mod 7. The pairs are distinct for c <= 20.
inline ShapeKind class_shape(std::size_t c) {
  return static_cast<ShapeKind>((c - 1) % kShapeKinds);
}
inline const std::array<float, 3>& class_color(std::size_t c) {
  return kHuePalette[(c - 1) % kHues];
}

struct ShapeInstance {
  std::size_t class_id = 1;
  double cx = 0.0, cy = 0.0;
  double size = 0.0;  // circle radius; square half-side; triangle circumradius

  ShapeKind kind() const { return class_shape(class_id); }

  double bounding_radius() const {
    switch (kind()) {
      case ShapeKind::circle: return size;
      case ShapeKind::square: return size * std::numbers::sqrt2;
      case ShapeKind::triangle: return size;
    }
    return size;
  }

  double area() const {
    switch (kind()) {
      case ShapeKind::circle: return std::numbers::pi * size * size;
      case ShapeKind::square: return 4.0 * size * size;
      case ShapeKind::triangle: return 3.0 * std::sqrt(3.0) / 4.0 * size * size;
    }
    return 0.0;
  }

  double perimeter() const {
    switch (kind()) {
      case ShapeKind::circle: return 2.0 * std::numbers::pi * size;
      case ShapeKind::square: return 8.0 * size;
      case ShapeKind::triangle: return 3.0 * std::sqrt(3.0) * size;
    }
    return 0.0;
  }

  // Point-in-shape test at continuous coordinates.
  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    switch (kind()) {
      case ShapeKind::circle: return dx * dx + dy * dy <= size * size;
      case ShapeKind::square: return std::fabs(dx) <= size && std::fabs(dy) <= size;
      case ShapeKind::triangle: {
        // Apex up; vertices at -90, 30 and 150 degrees.
        std::array<std::array<double, 2>, 3> v{};
        for (int i = 0; i < 3; ++i) {
          const double ang = (-90.0 + 120.0 * i) * std::numbers::pi / 180.0;
          v[i] = {cx + size * std::cos(ang), cy + size * std::sin(ang)};
        }
        bool neg = false, pos = false;
        for (int i = 0; i < 3; ++i) {
          const auto& a = v[i];
          const auto& b = v[(i + 1) % 3];
          const double s = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
          neg |= s < 0.0;
          pos |= s > 0.0;
        }
        return !(neg && pos);
      }
    }
    return false;
  }
};

struct SampleRecord {
  Tensor image;                 // [3, H, W] in [0, 1]
  LabelSet labels;
  std::optional<LabelMap> gt;   // evaluation only
  std::vector<ShapeInstance> shapes;
};

namespace detail {

inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
}

}  // namespace detail

/// Rasterizes `shapes` (pixel centers) over a noisy dark background.
inline SampleRecord render_sample(std::size_t image_size,
                                  std::vector<ShapeInstance> shapes,
                                  std::size_t num_classes,
                                  std::mt19937_64& rng) {
  const std::size_t n = image_size * image_size;
  SampleRecord s;
  s.image = Tensor({3, image_size, image_size});
  s.gt = LabelMap(image_size, image_size);
  s.labels.num_classes = num_classes;

  std::array<float, 3> base{};
  for (auto& v : base) v = static_cast<float>(detail::uniform(rng, 0.05, 0.25));
  for (std::size_t c = 0; c < 3; ++c) {
    std::fill(s.image.channel(c).begin(), s.image.channel(c).end(), base[c]);
  }
  for (const auto& sh : shapes) {
    std::array<float, 3> color = class_color(sh.class_id);
    for (auto& v : color) v += static_cast<float>(detail::uniform(rng, -0.05, 0.05));
    for (std::size_t y = 0; y < image_size; ++y) {
      for (std::size_t x = 0; x < image_size; ++x) {
        if (!sh.contains(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) continue;
        s.gt->at(y, x) = static_cast<std::int32_t>(sh.class_id);
        for (std::size_t c = 0; c < 3; ++c) s.image.at(c, y, x) = color[c];
      }
    }
    s.labels.present.push_back(sh.class_id);
  }
  for (std::size_t i = 0; i < 3 * n; ++i) {
    const float v = s.image[i] + static_cast<float>(detail::uniform(rng, -0.04, 0.04));
    s.image[i] = std::clamp(v, 0.0f, 1.0f);
  }
  std::sort(s.labels.present.begin(), s.labels.present.end());
  s.labels.present.erase(std::unique(s.labels.present.begin(), s.labels.present.end()),
                         s.labels.present.end());
  s.shapes = std::move(shapes);
  return s;
}

/// Deterministic synthetic dataset: each image holds 1-3 non-overlapping
/// shapes of distinct classes on a textured background.
inline std::vector<SampleRecord> synth_dataset(std::size_t num_images,
                                               std::size_t image_size,
                                               std::size_t num_fg_classes,
                                               std::uint64_t seed) {
  detail::require(num_fg_classes >= 1 && num_fg_classes <= kMaxForegroundClasses,
                  "num_fg_classes must be in 1.." +
                      std::to_string(kMaxForegroundClasses));
  detail::require(image_size >= 16 && image_size % 4 == 0,
                  "image size " + std::to_string(image_size) +
                      " too small to place shapes (need a multiple of 4, >= 16)");
  std::mt19937_64 rng(seed);
  const double lo = 0.11 * static_cast<double>(image_size);
  const double hi = 0.17 * static_cast<double>(image_size);
  const double dim = static_cast<double>(image_size);
  std::vector<SampleRecord> out;
  out.reserve(num_images);
  for (std::size_t i = 0; i < num_images; ++i) {
    const std::size_t count = 1 + detail::uniform_index(rng, std::min<std::size_t>(3, num_fg_classes));
    std::vector<std::size_t> classes(num_fg_classes);
    for (std::size_t c = 0; c < num_fg_classes; ++c) classes[c] = c + 1;
    for (std::size_t c = 0; c < count; ++c) {
      std::swap(classes[c], classes[c + detail::uniform_index(rng, num_fg_classes - c)]);
    }
    std::vector<ShapeInstance> shapes;
    for (std::size_t c = 0; c < count; ++c) {
      ShapeInstance sh;
      sh.class_id = classes[c];
      bool placed = false;
      for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
        const double shrink = attempt < 250 ? 1.0 : 0.8;
        sh.size = detail::uniform(rng, lo, hi) * shrink;
        if (sh.kind() == ShapeKind::square) sh.size *= 0.85;
        if (sh.kind() == ShapeKind::triangle) sh.size *= 1.35;
        const double br = sh.bounding_radius();
        if (2.0 * br + 2.0 > dim) continue;
        sh.cx = detail::uniform(rng, br + 1.0, dim - br - 1.0);
        sh.cy = detail::uniform(rng, br + 1.0, dim - br - 1.0);
        placed = std::all_of(shapes.begin(), shapes.end(), [&](const ShapeInstance& o) {
          return std::hypot(o.cx - sh.cx, o.cy - sh.cy) >= br + o.bounding_radius() + 2.0;
        });
      }
      detail::require(placed, "image size " + std::to_string(image_size) +
                                  " too small to place the requested shapes");
      shapes.push_back(sh);
    }
    out.push_back(render_sample(image_size, std::move(shapes), num_fg_classes + 1, rng));
  }
  return out;
}

}  // namespace sgseg

#endif  // SGSEG_SYNTH_HPP
