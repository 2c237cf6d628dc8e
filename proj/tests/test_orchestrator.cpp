#include <gtest/gtest.h>

#include <cstdlib>
#include <map>
#include <numeric>

#include "sgseg/orchestrator.hpp"

using namespace sgseg;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.image_size = 32;
  c.crop_size = 24;
  c.train_images = 8;
  c.val_images = 4;
  c.step1_iters = 6;
  c.step2_iters = 6;
  c.step1_batch = 4;
  c.step2_batch = 4;
  c.sg_iterations = 3;
  c.outer_iterations = 2;
  return c;
}

MicroNetParams fresh_params(const TrainConfig& c) {
  auto copy = c;
  copy.seed = 17;
  return initial_params(copy);
}

const std::vector<ParamGroup> kGroups{ParamGroup::backbone, ParamGroup::seg_head,
                                      ParamGroup::loc_head, ParamGroup::aggregation};

// RAII override of SG_THREADS.
class ThreadsEnv {
 public:
  explicit ThreadsEnv(const char* value) {
    if (const char* old = std::getenv("SG_THREADS")) saved_ = old;
    setenv("SG_THREADS", value, 1);
  }
  ~ThreadsEnv() {
    if (saved_.empty()) {
      unsetenv("SG_THREADS");
    } else {
      setenv("SG_THREADS", saved_.c_str(), 1);
    }
  }

 private:
  std::string saved_;
};

}  // namespace

TEST(Step1Gradient, AffinityTermOnlyReachesAggregation) {
  auto c = tiny_config();
  const auto data = make_train_set(c);
  const auto p = fresh_params(c);
  Step1Result l1, l2, l0;
  c.lambda = 1.0;
  const auto g1 = step1_gradient(data[0], p, c, l1);
  c.lambda = 2.0;
  const auto g2 = step1_gradient(data[0], p, c, l2);
  c.lambda = 0.0;
  const auto g0 = step1_gradient(data[0], p, c, l0);
  EXPECT_EQ(l1.classification, l2.classification);
  EXPECT_EQ(l1.affinity, l2.affinity);
  for (auto g : {ParamGroup::backbone, ParamGroup::seg_head, ParamGroup::loc_head}) {
    EXPECT_EQ(group_checksum(g1, g), group_checksum(g2, g));
    EXPECT_EQ(group_checksum(g1, g), group_checksum(g0, g));
  }
  for (float v : g0.agg_w.values()) EXPECT_EQ(v, 0.0f);
  for (float v : g0.agg_b.values()) EXPECT_EQ(v, 0.0f);
  for (std::size_t i = 0; i < g1.agg_w.size(); ++i) EXPECT_FLOAT_EQ(g2.agg_w[i], 2.0f * g1.agg_w[i]);
  // The segmentation head sits in front of the localization head, but step 1
  // does not train it; its gradient is still reported.
  EXPECT_TRUE(g1.seg_w.all_finite());
}

TEST(Training, ZeroLearningRateLeavesParametersUnchanged) {
  auto c = tiny_config();
  c.step1_lr = 0.0;
  c.step2_lr = 0.0;
  const auto data = make_train_set(c);
  const auto start = fresh_params(c);
  auto p = start;
  step1_train(data, p, c);
  EXPECT_EQ(p, start);
  std::vector<LabelMap> labels;
  for (const auto& s : data) labels.push_back(*s.gt);
  step2_train(data, labels, p, c);
  EXPECT_EQ(p, start);
}

TEST(Training, StepsOnlyTouchTheirGroups) {
  const auto c = tiny_config();
  const auto data = make_train_set(c);
  auto p = fresh_params(c);
  std::map<ParamGroup, std::uint64_t> before;
  for (auto g : kGroups) before[g] = group_checksum(p, g);
  step1_train(data, p, c);
  EXPECT_EQ(group_checksum(p, ParamGroup::seg_head), before[ParamGroup::seg_head]);
  EXPECT_NE(group_checksum(p, ParamGroup::backbone), before[ParamGroup::backbone]);
  EXPECT_NE(group_checksum(p, ParamGroup::loc_head), before[ParamGroup::loc_head]);
  EXPECT_NE(group_checksum(p, ParamGroup::aggregation), before[ParamGroup::aggregation]);

  for (auto g : kGroups) before[g] = group_checksum(p, g);
  std::vector<LabelMap> labels;
  for (const auto& s : data) labels.push_back(*s.gt);
  step2_train(data, labels, p, c);
  EXPECT_EQ(group_checksum(p, ParamGroup::loc_head), before[ParamGroup::loc_head]);
  EXPECT_EQ(group_checksum(p, ParamGroup::aggregation), before[ParamGroup::aggregation]);
  EXPECT_NE(group_checksum(p, ParamGroup::backbone), before[ParamGroup::backbone]);
  EXPECT_NE(group_checksum(p, ParamGroup::seg_head), before[ParamGroup::seg_head]);
}

TEST(Training, JointLossMovingAverageFalls) {
  auto c = tiny_config();
  // The affinity term is a sum over all pixel pairs and depends mostly on
  // which images are in the batch. 20 images at batch 4 make every window
  // below span whole epochs, so both windows average over the same images.
  c.train_images = 20;
  c.step1_iters = 200;
  const auto data = make_train_set(c);
  auto p = fresh_params(c);
  std::vector<double> joint;
  step1_train(data, p, c, 1, [&](const LossRecord& r) { joint.push_back(r.joint); });
  ASSERT_EQ(joint.size(), 200u);
  // 20-iteration windows ending at iterations 50 and 200.
  const double at50 = std::accumulate(joint.begin() + 30, joint.begin() + 50, 0.0) / 20;
  const double at200 = std::accumulate(joint.end() - 20, joint.end(), 0.0) / 20;
  EXPECT_LT(at200, at50);
}

TEST(Training, SegmentationLossMovingAverageFalls) {
  auto c = tiny_config();
  c.train_images = 16;
  c.step2_iters = 200;
  const auto data = make_train_set(c);
  std::vector<LabelMap> labels;
  for (const auto& s : data) labels.push_back(*s.gt);
  auto p = fresh_params(c);
  std::vector<double> loss;
  step2_train(data, labels, p, c, 1, [&](const LossRecord& r) { loss.push_back(r.primary); });
  const double at50 = std::accumulate(loss.begin() + 30, loss.begin() + 50, 0.0) / 20;
  const double at200 = std::accumulate(loss.end() - 20, loss.end(), 0.0) / 20;
  EXPECT_LT(at200, at50);
}

TEST(Training, FilteredLogitsGiveFiniteGradients) {
  auto c = tiny_config();
  c.filter_logits = true;
  const auto data = make_train_set(c);
  const auto p = fresh_params(c);
  Step2Result r;
  const auto g = step2_gradient(data[0].image, *data[0].gt, p, c, r);
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_GT(r.filter_alpha_grad, 0.0);
  g.visit([](const std::string& name, ParamGroup, const Tensor& t) {
    EXPECT_TRUE(t.all_finite()) << name;
  });
}

TEST(Refinement, GroundTruthMapsSurviveRefinement) {
  // Maps built from the true masks and a transition matrix built from the
  // image colors should come out of the pipeline nearly intact.
  TrainConfig c;
  const auto data = synth_dataset(12, 64, 3, 21);
  ConfusionMatrix cm(4);
  for (const auto& s : data) {
    const std::size_t h = c.affinity_h, w = c.affinity_w;
    LocalizationMaps a{Tensor({s.labels.present.size(), h, w}), s.labels.present};
    for (std::size_t k = 0; k < a.count(); ++k) {
      Tensor full({64, 64});
      for (std::size_t i = 0; i < full.size(); ++i) {
        full[i] = s.gt->labels[i] == static_cast<std::int32_t>(a.class_ids[k]) ? 1.0f : 0.0f;
      }
      const auto small = resize_bilinear(full.reshaped({1, 64, 64}), h, w);
      std::copy(small.values().begin(), small.values().end(), a.maps.channel(k).begin());
    }
    auto colors = resize_bilinear(s.image, h, w);
    for (float& v : colors.values()) v *= 20.0f;
    const auto stages = refine_stages(s.image, a, build_affinity(colors).T, c);
    EXPECT_FALSE(stages.degenerate);
    cm.add(stages.label_final, *s.gt);
  }
  EXPECT_GE(cm.report().miou, 0.9);
}

TEST(Refinement, PseudoLabelsComeWithFourStages) {
  const auto c = tiny_config();
  const auto data = make_train_set(c);
  const auto out = generate_pseudo_labels(data, fresh_params(c), c);
  EXPECT_EQ(out.labels.size(), data.size());
  EXPECT_EQ(out.stage_confusion.size(), 4u);
  EXPECT_EQ(out.evaluated, data.size());
  for (const auto& l : out.labels) {
    EXPECT_EQ(l.height, 32u);
    for (auto v : l.labels) EXPECT_LT(v, 4);
  }
}

TEST(Algorithm1, ReportLayout) {
  const auto c = tiny_config();
  const auto res = run_algorithm1(c, make_train_set(c), make_val_set(c));
  ASSERT_EQ(res.report.rows.size(), c.outer_iterations * 5);
  const std::vector<std::string> stages{"A", "R", "G", "G-iter3", "seg-val"};
  for (std::size_t i = 0; i < res.report.rows.size(); ++i) {
    EXPECT_EQ(res.report.rows[i].outer, i / 5 + 1);
    EXPECT_EQ(res.report.rows[i].stage, stages[i % 5]);
    EXPECT_GE(res.report.rows[i].miou, 0.0);
    EXPECT_LE(res.report.rows[i].miou, 1.0);
  }
  const auto text = format_report(res.report);
  EXPECT_EQ(text.rfind(report_header(), 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 11);
  EXPECT_NE(text.find("2\tseg-val\t"), std::string::npos);
  EXPECT_EQ(res.report.losses.size(), 2 * (c.step1_iters + c.step2_iters));
  EXPECT_EQ(res.pseudo_labels.size(), c.train_images);
}

TEST(Algorithm1, ThreadCountDoesNotChangeResults) {
  auto c = tiny_config();
  c.train_images = 7;  // uneven split across workers
  const auto train = make_train_set(c);
  const auto val = make_val_set(c);
  RunResult one, three;
  {
    ThreadsEnv env("1");
    one = run_algorithm1(c, train, val);
  }
  {
    ThreadsEnv env("3");
    three = run_algorithm1(c, train, val);
  }
  EXPECT_EQ(format_report(one.report), format_report(three.report));
  EXPECT_EQ(format_losses(one.report.losses), format_losses(three.report.losses));
  EXPECT_TRUE(one.params == three.params);
}

TEST(Algorithm1, OracleLabelsNeedGroundTruth) {
  auto c = tiny_config();
  c.oracle_labels = true;
  auto train = make_train_set(c);
  train[3].gt.reset();
  EXPECT_THROW(run_algorithm1(c, train, make_val_set(c)), std::invalid_argument);
}

TEST(Algorithm1, RejectsInvalidConfig) {
  auto c = tiny_config();
  c.gf_radius = 0;
  EXPECT_THROW(run_algorithm1(c, make_train_set(tiny_config()), {}), ConfigError);
}
