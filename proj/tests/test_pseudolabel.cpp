#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "oracles.hpp"
#include "sgseg/pseudolabel.hpp"

using namespace sgseg;

namespace {

LabelMap random_labels(std::size_t h, std::size_t w, std::int32_t classes, std::mt19937_64& rng) {
  LabelMap m(h, w);
  for (auto& v : m.labels) v = static_cast<std::int32_t>(oracle::pick(rng, 0, classes - 1));
  return m;
}

}  // namespace

TEST(AssignPseudoLabels, EverythingBelowThresholdIsBackground) {
  LocalizationMaps g{Tensor({2, 3, 3}, 0.2f), {1, 2}};
  const auto labels = assign_with_threshold(g, 0.5f);
  for (auto v : labels.labels) EXPECT_EQ(v, 0);
}

TEST(AssignPseudoLabels, SingleDominantSquare) {
  LocalizationMaps g{Tensor({3, 8, 8}), {1, 2, 4}};
  for (std::size_t y = 2; y < 5; ++y)
    for (std::size_t x = 3; x < 7; ++x) g.maps.at(1, y, x) = 1.0f;
  const auto out = assign_pseudo_labels(g);
  EXPECT_FALSE(out.degenerate);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      const bool inside = y >= 2 && y < 5 && x >= 3 && x < 7;
      EXPECT_EQ(out.labels.at(y, x), inside ? 2 : 0);
    }
}

TEST(AssignPseudoLabels, TiesGoToLowerClass) {
  LocalizationMaps g{Tensor({2, 2, 2}), {1, 3}};
  g.maps.at(0, 0, 0) = g.maps.at(1, 0, 0) = 0.9f;
  g.maps.at(1, 1, 1) = 0.9f;
  const auto out = assign_pseudo_labels(g);
  EXPECT_EQ(out.labels.at(0, 0), 1);
  EXPECT_EQ(out.labels.at(1, 1), 3);
  EXPECT_EQ(out.labels.at(0, 1), 0);
}

TEST(AssignPseudoLabels, ConstantMapsAreDegenerate) {
  const auto out = assign_pseudo_labels(LocalizationMaps{Tensor({2, 4, 4}, 0.6f), {1, 2}});
  EXPECT_TRUE(out.degenerate);
  for (auto v : out.labels.labels) EXPECT_EQ(v, 0);
}

TEST(AssignPseudoLabels, RejectsInconsistentClassIds) {
  EXPECT_THROW(assign_pseudo_labels(LocalizationMaps{Tensor({2, 4, 4}), {1}}), std::invalid_argument);
  EXPECT_THROW(assign_pseudo_labels(LocalizationMaps{Tensor({2, 4, 4}), {2, 1}}), std::invalid_argument);
}

TEST(AssignPseudoLabels, OutputsOnlyKnownClassesAndIsMonotone) {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 30; ++trial) {
    LocalizationMaps g{oracle::random_tensor({3, 6, 6}, rng, 0, 1), {2, 5, 7}};
    const auto out = assign_pseudo_labels(g);
    const std::set<std::int32_t> allowed{0, 2, 5, 7};
    for (auto v : out.labels.labels) EXPECT_TRUE(allowed.count(v));
    // Raising a labelled pixel's own class response keeps its label, for the
    // same threshold.
    for (std::size_t p = 0; p < 36; ++p) {
      const auto label = out.labels.labels[p];
      if (label == 0) continue;
      auto bumped = g;
      const std::size_t c = label == 2 ? 0 : (label == 5 ? 1 : 2);
      bumped.maps[c * 36 + p] += 0.3f;
      EXPECT_EQ(assign_with_threshold(bumped, out.threshold).labels[p], label);
    }
  }
}

TEST(DownsampleNearest, PicksCenterSamples) {
  LabelMap in(4, 4);
  for (std::size_t i = 0; i < 16; ++i) in.labels[i] = static_cast<std::int32_t>(i);
  const auto out = downsample_nearest(in, 2, 2);
  EXPECT_EQ(out.labels, (std::vector<std::int32_t>{5, 7, 13, 15}));
  EXPECT_EQ(downsample_nearest(in, 4, 4), in);
}

TEST(Crop, CopiesWindow) {
  LabelMap in(3, 4);
  for (std::size_t i = 0; i < 12; ++i) in.labels[i] = static_cast<std::int32_t>(i);
  EXPECT_EQ(crop(in, 1, 2, 2, 2).labels, (std::vector<std::int32_t>{6, 7, 10, 11}));
}

TEST(SegmentationLoss, UniformLogits) {
  const auto l = segmentation_loss(Tensor({21, 3, 3}), LabelMap(3, 3, 4));
  EXPECT_NEAR(l.loss, 3.044522, 1e-6);
}

TEST(SegmentationLoss, ConfidentCorrectLogits) {
  Tensor logits({3, 2, 2});
  for (float& v : logits.channel(2)) v = 1000.0f;
  const auto l = segmentation_loss(logits, LabelMap(2, 2, 2));
  EXPECT_NEAR(l.loss, 0.0, 1e-9);
  EXPECT_TRUE(l.d_logits.all_finite());
}

TEST(SegmentationLoss, MatchesOracleWithFiniteDifferences) {
  std::mt19937_64 rng(52);
  const auto logits = oracle::random_tensor({3, 4, 4}, rng, -3, 3);
  const auto target = random_labels(4, 4, 3, rng);
  const auto l = segmentation_loss(logits, target);
  const auto x = oracle::to_double(logits);
  EXPECT_NEAR(l.loss, oracle::cross_entropy(x, 3, target.labels), 1e-5);
  const auto c = oracle::check_gradient(
      [&](const oracle::Vec& v) { return oracle::cross_entropy(v, 3, target.labels); }, x,
      {l.d_logits.values().begin(), l.d_logits.values().end()}, 48, rng);
  EXPECT_EQ(c.probes, 48u);
  EXPECT_LT(c.worst, 1e-3);
  for (std::size_t p = 0; p < 16; ++p) {
    double s = 0.0;
    for (std::size_t ch = 0; ch < 3; ++ch) s += l.d_logits[ch * 16 + p];
    EXPECT_NEAR(s, 0.0, 1e-5);
  }
}

TEST(SegmentationLoss, ShapeAndRangeErrors) {
  EXPECT_THROW(segmentation_loss(Tensor({3, 4, 4}), LabelMap(4, 5)), std::invalid_argument);
  EXPECT_THROW(segmentation_loss(Tensor({3, 2, 2}), LabelMap(2, 2, 3)), std::invalid_argument);
}

TEST(Miou, PerfectPrediction) {
  std::mt19937_64 rng(53);
  const auto m = random_labels(8, 8, 4, rng);
  EXPECT_DOUBLE_EQ(compute_miou(m, m, 4).miou, 1.0);
}

TEST(Miou, DisjointForegroundGivesZero) {
  LabelMap truth(4, 4), pred(4, 4);
  truth.at(0, 0) = 1;
  pred.at(3, 3) = 1;
  const auto r = compute_miou(pred, truth, 3);
  EXPECT_EQ(r.per_class_iou[1], 0.0);
  EXPECT_TRUE(r.defined[1]);
  EXPECT_FALSE(r.defined[2]);
}

TEST(Miou, HalfOverlap) {
  LabelMap truth(20, 20), pred(20, 20);
  for (std::size_t i = 0; i < 100; ++i) truth.labels[i] = 1;
  for (std::size_t i = 50; i < 150; ++i) pred.labels[i] = 1;
  EXPECT_NEAR(compute_miou(pred, truth, 2).per_class_iou[1], 50.0 / 150.0, 1e-12);
}

TEST(Miou, SymmetricAndPermutationInvariant) {
  std::mt19937_64 rng(54);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_labels(7, 9, 5, rng), b = random_labels(7, 9, 5, rng);
    EXPECT_DOUBLE_EQ(compute_miou(a, b, 5).miou, compute_miou(b, a, 5).miou);
    std::vector<std::size_t> perm(63);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    LabelMap pa(7, 9), pb(7, 9);
    for (std::size_t i = 0; i < 63; ++i) {
      pa.labels[i] = a.labels[perm[i]];
      pb.labels[i] = b.labels[perm[i]];
    }
    EXPECT_DOUBLE_EQ(compute_miou(pa, pb, 5).miou, compute_miou(a, b, 5).miou);
  }
}

TEST(Miou, ConfusionMergeEqualsJointAccumulation) {
  std::mt19937_64 rng(55);
  ConfusionMatrix joint(3), left(3), right(3);
  for (int i = 0; i < 4; ++i) {
    const auto p = random_labels(5, 5, 3, rng), t = random_labels(5, 5, 3, rng);
    joint.add(p, t);
    (i % 2 ? left : right).add(p, t);
  }
  left.merge(right);
  EXPECT_DOUBLE_EQ(left.report().miou, joint.report().miou);
  EXPECT_THROW(left.add(LabelMap(2, 2), LabelMap(2, 3)), std::invalid_argument);
  EXPECT_THROW(left.add(LabelMap(2, 2, 3), LabelMap(2, 2)), std::invalid_argument);
}

TEST(ArgmaxLabels, LowestIndexOnTies) {
  Tensor s({3, 1, 2});
  s.at(1, 0, 0) = 2.0f;
  s.at(2, 0, 0) = 2.0f;
  const auto m = argmax_labels(s);
  EXPECT_EQ(m.labels, (std::vector<std::int32_t>{1, 0}));
}
