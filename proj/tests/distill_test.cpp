#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "bevkd/distill.hpp"
#include "bevkd/errors.hpp"
#include "bevkd/gradcheck.hpp"
#include "bevkd/ops.hpp"
#include "bevkd/trainer.hpp"
#include "fixtures.hpp"
#include "test_util.hpp"

namespace bevkd {
namespace {

using testing::random_tensor;

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto x = a.data(), y = b.data();
  return std::equal(x.begin(), x.end(), y.begin());
}

DistillRecord random_record(std::size_t layers, std::size_t pillars, std::size_t k, std::size_t spatial,
                            std::mt19937_64& rng) {
  DistillRecord r;
  for (std::size_t l = 0; l < layers; ++l) {
    r.a_temporal.push_back(ops::softmax(random_tensor({pillars, 2 * k}, rng), 1));
    r.a_spatial.push_back(ops::softmax(random_tensor({pillars, spatial}, rng), 1));
  }
  r.e_bev = random_tensor({pillars, 3}, rng);
  return r;
}

TEST(LayerMap, LastToLast) {
  EXPECT_EQ(default_layer_map(2, 3), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(default_layer_map(3, 3), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(default_layer_map(3, 6), (std::vector<std::size_t>{1, 3, 5}));
  EXPECT_EQ(default_layer_map(1, 4), (std::vector<std::size_t>{3}));
  EXPECT_EQ(default_layer_map(3, 2), (std::vector<std::size_t>{0, 1, 1}));
  EXPECT_THROW(default_layer_map(0, 2), ConfigError);
}

TEST(SpatialTemporalLoss, IdenticalRecordsGiveZero) {
  std::mt19937_64 rng(1);
  const auto rec = random_record(2, 5, 3, 12, rng);
  EXPECT_EQ(spatial_temporal_loss(rec, rec, {0, 1}).item(), 0.0);
}

TEST(SpatialTemporalLoss, HandComputedTwoPointGroup) {
  DistillRecord s, t;
  s.a_temporal = {Tensor(Shape{1, 2}, std::vector<double>{1.0, 0.0})};
  t.a_temporal = {Tensor(Shape{1, 2}, std::vector<double>{0.5, 0.5})};
  s.a_spatial = t.a_spatial = {Tensor(Shape{1, 2}, 0.0)};
  EXPECT_DOUBLE_EQ(spatial_temporal_loss(s, t, {0}).item(), 0.25);
}

TEST(SpatialTemporalLoss, SumsOverMappedLayers) {
  std::mt19937_64 rng(2);
  const auto s = random_record(2, 4, 2, 8, rng);
  const auto t = random_record(3, 4, 2, 8, rng);
  double expect = 0.0;
  const std::size_t map[] = {1, 2};
  for (std::size_t l = 0; l < 2; ++l) {
    for (const auto member : {&DistillRecord::a_temporal, &DistillRecord::a_spatial}) {
      const Tensor& a = (s.*member)[l];
      const Tensor& b = (t.*member)[map[l]];
      double sq = 0.0;
      for (std::size_t i = 0; i < a.numel(); ++i) sq += (a.at(i) - b.at(i)) * (a.at(i) - b.at(i));
      expect += sq / static_cast<double>(a.numel());
    }
  }
  EXPECT_NEAR(spatial_temporal_loss(s, t, {1, 2}).item(), expect, 1e-15);
}

TEST(SpatialTemporalLoss, ShapeMismatchNamesTheLayers) {
  std::mt19937_64 rng(3);
  const auto s = random_record(1, 4, 2, 8, rng);
  const auto t = random_record(2, 4, 3, 8, rng);
  try {
    spatial_temporal_loss(s, t, {1});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("student layer 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("teacher layer 1"), std::string::npos) << msg;
  }
  EXPECT_THROW(spatial_temporal_loss(s, t, {5}), ConfigError);
  EXPECT_THROW(spatial_temporal_loss(s, t, {0, 1}), ConfigError);
}

TEST(SpatialTemporalLoss, GradientFlowsToStudentOnly) {
  std::mt19937_64 rng(4);
  auto s = random_record(1, 3, 2, 4, rng);
  auto t = random_record(1, 3, 2, 4, rng);
  const Tensor student_t = s.a_temporal[0].detached_copy();
  const ScalarFn f = [&](const Tensor& x) {
    DistillRecord r = s;
    r.a_temporal[0] = x;
    return spatial_temporal_loss(r, t, {0});
  };
  EXPECT_LT(finite_diff_check(f, student_t, 1e-6), 1e-6);

  Tensor teacher_leaf = t.a_temporal[0].detached_copy();
  teacher_leaf.set_requires_grad(true);
  t.a_temporal[0] = teacher_leaf;
  DistillRecord r = s;
  Tensor student_leaf = student_t.detached_copy();
  student_leaf.set_requires_grad(true);
  r.a_temporal[0] = student_leaf;
  spatial_temporal_loss(r, t, {0}).backward();
  EXPECT_TRUE(student_leaf.has_grad());
  EXPECT_FALSE(teacher_leaf.has_grad());
}

TEST(BevResponse, HandCases) {
  EXPECT_EQ(bev_response(Tensor(Shape{3, 4}, 0.0)).data()[1], 0.0);
  const Tensor c = bev_response(Tensor(Shape{5, 3}, -1.75));
  ASSERT_EQ(c.shape(), (Shape{5}));
  for (double v : c.data()) EXPECT_DOUBLE_EQ(v, 1.75);
  EXPECT_DOUBLE_EQ(bev_response(Tensor(Shape{1, 2}, std::vector<double>{3.0, -4.0})).item(), 3.5);
  EXPECT_THROW(bev_response(Tensor(Shape{4}, 1.0)), DimensionError);
}

TEST(ResponseLoss, EqualAndSignFlippedAreZero) {
  std::mt19937_64 rng(5);
  const Tensor e = random_tensor({6, 4}, rng);
  EXPECT_EQ(response_loss(e, e).item(), 0.0);
  EXPECT_EQ(response_loss(ops::scale(e, -1.0), e).item(), 0.0);
  EXPECT_GT(response_loss(ops::scale(e, 1.5), e).item(), 0.0);
  EXPECT_THROW(response_loss(e, random_tensor({6, 5}, rng)), ConfigError);
}

TEST(ResponseLoss, GradientMatches) {
  std::mt19937_64 rng(6);
  const Tensor s = testing::random_away_from_zero({5, 3}, rng);
  const Tensor t = random_tensor({5, 3}, rng);
  const ScalarFn f = [&](const Tensor& x) { return response_loss(x, t); };
  EXPECT_LT(finite_diff_check(f, s.detached_copy(), 1e-6), 1e-6);
}

TEST(TotalLoss, ArithmeticAndAffinity) {
  DistillConfig cfg;
  const Tensor one = Tensor::scalar(1.0), two = Tensor::scalar(2.0), three = Tensor::scalar(3.0);
  EXPECT_DOUBLE_EQ(total_loss(one, two, three, cfg).item(), 1.05);
  cfg.lambda = 0.0;
  EXPECT_EQ(total_loss(one, two, three, cfg).item(), 1.0);

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor lo = Tensor::scalar(u(rng)), ls = Tensor::scalar(u(rng)), lr = Tensor::scalar(u(rng));
    const double lambdas[] = {0.0, 1e-3, 1e-2};
    for (double a : lambdas)
      for (double b : lambdas) {
        DistillConfig ca, cb;
        ca.lambda = a;
        cb.lambda = b;
        const double diff = total_loss(lo, ls, lr, cb).item() - total_loss(lo, ls, lr, ca).item();
        EXPECT_NEAR(diff, (b - a) * (ls.item() + lr.item()), 1e-12);
      }
  }
}

TEST(TotalLoss, DisabledOrMissingTermsContributeNothing) {
  const Tensor lo = Tensor::scalar(0.7), ls = Tensor::scalar(2.0), lr = Tensor::scalar(5.0);
  DistillConfig cfg;
  cfg.lambda = 0.5;
  cfg.enable_response = false;
  EXPECT_DOUBLE_EQ(total_loss(lo, ls, lr, cfg).item(), 1.7);
  cfg.enable_response = true;
  cfg.enable_spatial_temporal = false;
  EXPECT_DOUBLE_EQ(total_loss(lo, ls, lr, cfg).item(), 3.2);
  cfg.enable_spatial_temporal = true;
  EXPECT_EQ(total_loss(lo, Tensor(), Tensor(), cfg).item(), 0.7);
  cfg.lambda = -1.0;
  EXPECT_THROW(total_loss(lo, ls, lr, cfg), ConfigError);
}

TEST(InheritMode, ParsesLeniently) {
  EXPECT_EQ(parse_inherit_mode("INHERIT_AND_FREEZE"), InheritMode::kInheritAndFreeze);
  EXPECT_EQ(parse_inherit_mode("init-only"), InheritMode::kInitOnly);
  EXPECT_EQ(parse_inherit_mode("off"), InheritMode::kOff);
  EXPECT_THROW(parse_inherit_mode("sometimes"), ConfigError);
  for (auto m : {InheritMode::kInheritAndFreeze, InheritMode::kInitOnly, InheritMode::kOff})
    EXPECT_EQ(parse_inherit_mode(to_string(m)), m);
  DistillConfig cfg;
  cfg.enable_weight_inherit = false;
  EXPECT_EQ(cfg.effective_inherit_mode(), InheritMode::kOff);
  cfg.enable_spatial_temporal = cfg.enable_response = false;
  EXPECT_TRUE(cfg.is_noop());
}

TEST(WeightInheriting, ModesCopyAndFreezeAsDocumented) {
  auto scfg = testing::tiny_model(1, 3), tcfg = testing::tiny_model(2, 5);
  scfg.init_seed = 1;
  tcfg.init_seed = 2;
  const auto teacher = init_params(tcfg);
  const auto fresh = init_params(scfg);

  auto off = fresh.clone();
  apply_weight_inheriting(off, teacher, InheritMode::kOff);
  for (const auto& name : fresh.names) EXPECT_TRUE(bitwise_equal(off.at(name), fresh.at(name))) << name;
  EXPECT_TRUE(off.frozen.empty());

  auto init = fresh.clone();
  apply_weight_inheriting(init, teacher, InheritMode::kInitOnly);
  EXPECT_TRUE(bitwise_equal(init.at("bev_queries"), teacher.at("bev_queries")));
  EXPECT_TRUE(bitwise_equal(init.at("pos_encoding"), teacher.at("pos_encoding")));
  EXPECT_FALSE(bitwise_equal(init.at("object_queries"), teacher.at("object_queries")));
  EXPECT_TRUE(init.frozen.empty());

  auto freeze = fresh.clone();
  apply_weight_inheriting(freeze, teacher, InheritMode::kInheritAndFreeze, true);
  EXPECT_TRUE(bitwise_equal(freeze.at("object_queries"), teacher.at("object_queries")));
  EXPECT_EQ(freeze.frozen, (std::set<std::string>{"bev_queries", "pos_encoding", "object_queries"}));

  auto wide = testing::tiny_model(1, 3);
  wide.embed_dim = 8;
  auto mismatched = init_params(wide);
  EXPECT_THROW(apply_weight_inheriting(mismatched, teacher, InheritMode::kInitOnly), ConfigError);
}

class InheritTraining : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new Dataset(generate_dataset(11, testing::tiny_scene(), 2));
    auto cfg = testing::tiny_train_config(30);
    cfg.model = cfg.teacher_model;
    teacher_ = new DetectorParams(train_teacher(cfg, *data_).params);
  }
  static void TearDownTestSuite() {
    delete teacher_;
    delete data_;
  }
  static TrainResult run(InheritMode mode, std::size_t steps) {
    auto cfg = testing::tiny_train_config(steps);
    cfg.distill.inherit_mode = mode;
    return distill_student(cfg, *data_, *teacher_);
  }
  static Dataset* data_;
  static DetectorParams* teacher_;
};
Dataset* InheritTraining::data_ = nullptr;
DetectorParams* InheritTraining::teacher_ = nullptr;

TEST_F(InheritTraining, FreezeKeepsTeacherTensorsBitwise) {
  const auto r = run(InheritMode::kInheritAndFreeze, 100);
  EXPECT_TRUE(bitwise_equal(r.params.at("bev_queries"), teacher_->at("bev_queries")));
  EXPECT_TRUE(bitwise_equal(r.params.at("pos_encoding"), teacher_->at("pos_encoding")));
  EXPECT_TRUE(r.params.is_frozen("bev_queries"));
}

TEST_F(InheritTraining, InitOnlyDiverges) {
  const auto r = run(InheritMode::kInitOnly, 100);
  EXPECT_FALSE(bitwise_equal(r.params.at("bev_queries"), teacher_->at("bev_queries")));
  EXPECT_FALSE(bitwise_equal(r.params.at("pos_encoding"), teacher_->at("pos_encoding")));
  EXPECT_FALSE(r.params.is_frozen("bev_queries"));
}

TEST_F(InheritTraining, TeacherIsNeverModified) {
  const auto before = params_digest(*teacher_);
  run(InheritMode::kInheritAndFreeze, 20);
  EXPECT_EQ(params_digest(*teacher_), before);
  for (const auto& name : teacher_->names) EXPECT_FALSE(teacher_->at(name).has_grad()) << name;
}

TEST_F(InheritTraining, IdentityDistillationHasZeroKdLoss) {
  const auto student = teacher_->clone();
  const auto& seq = data_->sequences[0];
  const auto s = forward_window(student, seq.rig, seq.frames[0], seq.frames[1]);
  const auto t = forward_window(*teacher_, seq.rig, seq.frames[0], seq.frames[1]);
  const Tensor l_st = spatial_temporal_loss(s.record, t.record, default_layer_map(2, 2));
  const Tensor l_resp = response_loss(s.e_bev, t.e_bev);
  EXPECT_LE(std::abs(l_st.item()), 1e-12);
  EXPECT_LE(std::abs(l_resp.item()), 1e-12);
  const Tensor l_orig = detection_loss(s.dets, boxes_in_grid(seq.frames[1].boxes, student.config.grid));
  EXPECT_EQ(total_loss(l_orig, l_st, l_resp, DistillConfig{}).item(), l_orig.item());
}

}  // namespace
}  // namespace bevkd
