#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "sgseg/guided.hpp"

using namespace sgseg;

namespace {

std::vector<float> as_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// A few map families that stress the histogram: continuous, bimodal,
// coarsely quantized (many empty bins and ties), and heavy-tailed.
Tensor random_map(std::mt19937_64& rng, int family) {
  const std::size_t h = oracle::pick(rng, 2, 24), w = oracle::pick(rng, 2, 24);
  Tensor m({h, w});
  for (float& v : m.values()) {
    switch (family % 4) {
      case 0: v = static_cast<float>(oracle::uniform(rng, -3, 5)); break;
      case 1:
        v = static_cast<float>(oracle::uniform(rng, 0, 1) < 0.3 ? oracle::uniform(rng, 0.6, 1.0)
                                                                : oracle::uniform(rng, 0.0, 0.5));
        break;
      case 2: v = static_cast<float>(oracle::pick(rng, 0, 5)) * 0.2f; break;
      default: v = static_cast<float>(std::pow(oracle::uniform(rng, 0, 1), 6.0)); break;
    }
  }
  return m;
}

Tensor image_from_luma(const Tensor& g) {
  Tensor img({3, g.dim(0), g.dim(1)});
  for (std::size_t c = 0; c < 3; ++c) std::copy(g.values().begin(), g.values().end(), img.channel(c).begin());
  return img;
}

// Boundary pixels of a mask: inside, with a 4-neighbour outside or on the
// image edge.
std::vector<std::size_t> boundary(const std::vector<bool>& mask, std::size_t h, std::size_t w) {
  std::vector<std::size_t> out;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!mask[y * w + x]) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w || !mask[(y - 1) * w + x] ||
                        !mask[(y + 1) * w + x] || !mask[y * w + x - 1] || !mask[y * w + x + 1];
      if (edge) out.push_back(y * w + x);
    }
  return out;
}

double boundary_f_measure(const std::vector<bool>& pred, const std::vector<bool>& truth,
                          std::size_t h, std::size_t w) {
  const auto bp = boundary(pred, h, w), bt = boundary(truth, h, w);
  auto near = [&](std::size_t a, const std::vector<std::size_t>& set) {
    for (auto b : set) {
      const long dy = static_cast<long>(a / w) - static_cast<long>(b / w);
      const long dx = static_cast<long>(a % w) - static_cast<long>(b % w);
      if (std::abs(dy) <= 1 && std::abs(dx) <= 1) return true;
    }
    return false;
  };
  double hp = 0, ht = 0;
  for (auto a : bp) hp += near(a, bt);
  for (auto a : bt) ht += near(a, bp);
  if (bp.empty() || bt.empty()) return 0.0;
  const double precision = hp / bp.size(), recall = ht / bt.size();
  return precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
}

}  // namespace

TEST(Otsu, TwoLevelMap) {
  Tensor m({4, 4}, 0.2f);
  for (std::size_t i = 0; i < 8; ++i) m[i * 2] = 0.8f;
  const auto r = otsu_threshold(m);
  EXPECT_FALSE(r.degenerate);
  EXPECT_GE(r.threshold, 0.2f);
  EXPECT_LT(r.threshold, 0.8f);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(r.binary[i], m[i] == 0.8f ? 1.0f : 0.0f);
}

TEST(Otsu, ConstantMapIsDegenerate) {
  const auto r = otsu_threshold(Tensor({5, 5}, 0.3f));
  EXPECT_TRUE(r.degenerate);
  for (float v : r.binary.values()) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(otsu_threshold(Tensor()), std::invalid_argument);
}

TEST(Otsu, MatchesExhaustiveSearch) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const auto m = random_map(rng, trial);
    const auto r = otsu_threshold(m);
    const auto ref = oracle::otsu_exhaustive(as_vector(m));
    ASSERT_EQ(r.degenerate, ref.constant);
    if (!ref.constant) ASSERT_EQ(r.bin, ref.bin) << "trial " << trial;
    for (std::size_t i = 0; i < m.size(); ++i) {
      ASSERT_EQ(r.binary[i], m[i] > r.threshold ? 1.0f : 0.0f);
    }
  }
}

TEST(Otsu, AffineRescalingInvariance) {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 50; ++trial) {
    // Dyadic values so a*x + b is exact in float.
    Tensor m({9, 7});
    for (float& v : m.values()) v = static_cast<float>(oracle::pick(rng, 0, 1024)) / 1024.0f;
    Tensor s(m.shape());
    for (std::size_t i = 0; i < m.size(); ++i) s[i] = 2.0f * m[i] + 0.25f;
    const auto a = otsu_threshold(m), b = otsu_threshold(s);
    EXPECT_EQ(a.binary, b.binary);
    EXPECT_EQ(b.threshold, 2.0f * a.threshold + 0.25f);
  }
}

TEST(GuidedFilter, MatchesExplicitKernel) {
  std::mt19937_64 rng(33);
  const auto guide = oracle::random_tensor({8, 8}, rng, 0, 1);
  const auto input = oracle::random_tensor({8, 8}, rng, 0, 1);
  const auto g = guided_filter(guide, input, 2, 1e-6);
  const auto k = oracle::guided_kernel(oracle::to_double(guide), 8, 8, 2, 1e-6);
  const auto ref = oracle::matvec(k, oracle::to_double(input));
  for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(g.output[i], ref[i], 1e-4);
}

TEST(GuidedFilter, ConstantGuideIsDoubleBoxMean) {
  std::mt19937_64 rng(34);
  const auto input = oracle::random_tensor({9, 7}, rng);
  const auto g = guided_filter(Tensor({9, 7}, 0.5f), input, 2, 1e-3);
  for (float a : g.coeffs.alpha.values()) EXPECT_EQ(a, 0.0f);
  const auto twice = box_filter(box_filter(input.reshaped({1, 9, 7}), 2), 2);
  for (std::size_t i = 0; i < input.size(); ++i) EXPECT_NEAR(g.output[i], twice[i], 1e-5);
}

TEST(GuidedFilter, SelfGuidanceReconstructsInput) {
  std::mt19937_64 rng(35);
  for (std::size_t r : {1u, 2u, 3u}) {
    const auto x = oracle::random_tensor({10, 11}, rng, 0, 1);
    const auto g = guided_filter(x, x, r, 1e-9);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(g.output[i], x[i], 1e-4);
  }
}

TEST(GuidedFilter, PreservesConstants) {
  std::mt19937_64 rng(36);
  for (int trial = 0; trial < 20; ++trial) {
    const auto guide = oracle::random_tensor({oracle::pick(rng, 3, 12), oracle::pick(rng, 3, 12)}, rng, 0, 1);
    const double eps = trial % 2 ? 1e-6 : 1e-1;
    const auto g = guided_filter(guide, Tensor(guide.shape(), 0.37f), oracle::pick(rng, 1, 3), eps);
    for (float v : g.output.values()) EXPECT_NEAR(v, 0.37f, 1e-5);
  }
}

TEST(GuidedFilter, RejectsBadArguments) {
  EXPECT_THROW(guided_filter(Tensor({4, 4}), Tensor({4, 5}), 1, 1e-3), std::invalid_argument);
  EXPECT_THROW(guided_filter(Tensor({4, 4}), Tensor({4, 4}), 0, 1e-3), std::invalid_argument);
  EXPECT_THROW(guided_filter(Tensor({4, 4}), Tensor({4, 4}), 5, 1e-3), std::invalid_argument);
  EXPECT_THROW(guided_filter(Tensor({4, 4}), Tensor({4, 4}), 1, -1.0), std::invalid_argument);
  EXPECT_THROW(guided_filter(Tensor({1, 4, 4}), Tensor({1, 4, 4}), 1, 1e-3), std::invalid_argument);
}

TEST(GuidedBackward, ZeroUpstream) {
  std::mt19937_64 rng(37);
  const auto guide = oracle::random_tensor({6, 6}, rng, 0, 1);
  const auto input = oracle::random_tensor({6, 6}, rng);
  const auto fwd = guided_filter(guide, input, 1, 1e-2);
  const auto g = guided_filter_backward(Tensor({6, 6}), guide, input, fwd.coeffs);
  for (const Tensor* t : {&g.alpha, &g.beta, &g.input}) {
    for (float v : t->values()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(GuidedBackward, ConstantGuideInteriorIsDoubleBoxMean) {
  std::mt19937_64 rng(38);
  const std::size_t h = 16, w = 15, r = 2;
  const auto up = oracle::random_tensor({h, w}, rng);
  const auto fwd = guided_filter(Tensor({h, w}, 0.5f), up, r, 1e-3);
  const auto g = guided_filter_backward(up, Tensor({h, w}, 0.5f), up, fwd.coeffs);
  const auto twice = box_filter(box_filter(up.reshaped({1, h, w}), r), r);
  // The transposed clipped mean divides by window counts two hops away, so it
  // agrees with the plain box only 3r away from the border.
  for (std::size_t y = 3 * r; y + 3 * r < h; ++y)
    for (std::size_t x = 3 * r; x + 3 * r < w; ++x)
      EXPECT_NEAR(g.input.at(y, x), twice[y * w + x], 1e-5);
}

TEST(GuidedBackward, InputGradientFiniteDifferences) {
  std::mt19937_64 rng(39);
  for (double eps : {1e-6, 1e-2}) {
    const std::size_t h = 7, w = 6, r = 2;
    const auto guide = oracle::random_tensor({h, w}, rng, 0, 1);
    const auto input = oracle::random_tensor({h, w}, rng);
    const auto up = oracle::random_tensor({h, w}, rng);
    const auto fwd = guided_filter(guide, input, r, eps);
    const auto g = guided_filter_backward(up, guide, input, fwd.coeffs);
    const auto k = oracle::guided_kernel(oracle::to_double(guide), h, w, r, eps);
    const auto upd = oracle::to_double(up);
    auto f = [&](const oracle::Vec& p) {
      const auto out = oracle::matvec(k, p);
      double s = 0.0;
      for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * upd[i];
      return s;
    };
    const auto c = oracle::check_gradient(f, oracle::to_double(input), as_vector(g.input), 42, rng);
    EXPECT_EQ(c.probes, 42u);
    EXPECT_LT(c.worst, 1e-3);
  }
}

TEST(GuidedBackward, CoefficientGradientsAccumulate) {
  std::mt19937_64 rng(40);
  const auto guide = oracle::random_tensor({5, 6}, rng, 0, 1);
  const auto up = oracle::random_tensor({5, 6}, rng);
  const GuidedFilter filter(guide, 1, 1e-4);
  GuidedGrads acc;
  filter.accumulate_backward(up, acc);
  const auto once = acc;
  filter.accumulate_backward(up, acc);
  for (std::size_t i = 0; i < up.size(); ++i) {
    EXPECT_FLOAT_EQ(once.alpha[i], guide[i] * up[i]);
    EXPECT_FLOAT_EQ(once.beta[i], up[i]);
    EXPECT_FLOAT_EQ(acc.alpha[i], 2.0f * once.alpha[i]);
    EXPECT_FLOAT_EQ(acc.beta[i], 2.0f * once.beta[i]);
    EXPECT_FLOAT_EQ(acc.input[i], 2.0f * once.input[i]);
  }
}

TEST(SelfGuidedRefine, OneIterationIsOneFilterCall) {
  std::mt19937_64 rng(41);
  const auto img = oracle::random_tensor({3, 12, 12}, rng, 0, 1);
  const LocalizationMaps r{oracle::random_tensor({2, 12, 12}, rng), {1, 2}};
  const auto out = self_guided_refine(img, r, 1, 2, 1e-6);
  for (std::size_t c = 0; c < 2; ++c) {
    const Tensor plane({12, 12}, std::vector<float>(r.maps.channel(c).begin(), r.maps.channel(c).end()));
    const auto b = otsu_threshold(plane);
    EXPECT_EQ(out.thresholds[c], b.threshold);
    const auto g = guided_filter(luma(img), b.binary, 2, 1e-6);
    for (std::size_t i = 0; i < 144; ++i) EXPECT_EQ(out.refined.maps[c * 144 + i], g.output[i]);
  }
}

TEST(SelfGuidedRefine, ConstantGuideIsBoxCascade) {
  std::mt19937_64 rng(42);
  const LocalizationMaps r{oracle::random_tensor({1, 10, 10}, rng), {1}};
  const std::size_t iterations = 4;
  const auto out = self_guided_refine(Tensor({3, 10, 10}, 0.5f), r, iterations, 1, 1e-6);
  Tensor expect = otsu_threshold(r.maps.reshaped({10, 10})).binary.reshaped({1, 10, 10});
  for (std::size_t i = 0; i < 2 * iterations; ++i) expect = box_filter(expect, 1);
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_NEAR(out.refined.maps[i], expect[i], 1e-5);
    EXPECT_GE(out.refined.maps[i], -1e-4f);
    EXPECT_LE(out.refined.maps[i], 1.0f + 1e-4f);
  }
}

TEST(SelfGuidedRefine, ObserverSeesEveryIteration) {
  std::mt19937_64 rng(43);
  const auto img = oracle::random_tensor({3, 8, 8}, rng, 0, 1);
  const LocalizationMaps r{oracle::random_tensor({1, 4, 4}, rng), {2}};
  std::vector<std::size_t> seen;
  const auto out = self_guided_refine(img, r, 5, 1, 1e-6, [&](std::size_t it, const LocalizationMaps& g) {
    seen.push_back(it);
    EXPECT_EQ(g.maps.shape(), Shape({1, 8, 8}));
  });
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3, 4, 5}));
  EXPECT_THROW(self_guided_refine(img, r, 0, 1, 1e-6), std::invalid_argument);
}

TEST(SelfGuidedRefine, StaysNearBinaryRange) {
  std::mt19937_64 rng(44);
  for (int trial = 0; trial < 10; ++trial) {
    const auto img = oracle::random_tensor({3, 16, 16}, rng, 0, 1);
    const LocalizationMaps r{oracle::random_tensor({2, 8, 8}, rng), {1, 2}};
    const auto out = self_guided_refine(img, r, 15, 2, 1e-6);
    for (float v : out.refined.maps.values()) {
      EXPECT_GE(v, -0.05f);
      EXPECT_LE(v, 1.05f);
    }
  }
}

TEST(SelfGuidedRefine, ConstantMapIsFlaggedDegenerate) {
  const auto out = self_guided_refine(Tensor({3, 8, 8}, 0.2f), LocalizationMaps{Tensor({1, 8, 8}, 0.4f), {1}},
                                      3, 1, 1e-6);
  EXPECT_TRUE(out.degenerate);
  EXPECT_TRUE(out.class_degenerate[0]);
  for (float v : out.refined.maps.values()) EXPECT_EQ(v, 0.0f);
}

// A square on a contrasting background with a dilated, noisy response map:
// repeated filtering pulls the boundary onto the square's edges.
TEST(SelfGuidedRefine, BoundaryImprovesWithIterations) {
  std::mt19937_64 rng(45);
  const std::size_t side = 48, lo = 15, hi = 33;
  Tensor gray({side, side}, 0.2f);
  std::vector<bool> truth(side * side, false);
  for (std::size_t y = lo; y < hi; ++y)
    for (std::size_t x = lo; x < hi; ++x) {
      gray.at(y, x) = 0.8f;
      truth[y * side + x] = true;
    }
  for (float& v : gray.values()) v += static_cast<float>(oracle::uniform(rng, -0.02, 0.02));
  Tensor response({1, side, side});
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const bool dilated = y + 4 >= lo && y < hi + 4 && x + 4 >= lo && x < hi + 4;
      response[y * side + x] = (dilated ? 0.7f : 0.2f) + static_cast<float>(oracle::uniform(rng, -0.1, 0.1));
    }
  std::vector<double> f(16, 0.0);
  self_guided_refine(image_from_luma(gray), LocalizationMaps{response, {1}}, 15, 3, 1e-6,
                     [&](std::size_t it, const LocalizationMaps& g) {
                       std::vector<bool> mask(side * side);
                       for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = g.maps[i] > 0.5f;
                       f[it] = boundary_f_measure(mask, truth, side, side);
                     });
  EXPECT_GT(f[15], f[1]);
  EXPECT_GT(f[15], 0.9);
}
