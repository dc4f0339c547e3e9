#include "bevkd/gradcheck_suite.hpp"

#include <cmath>
#include <functional>
#include <random>

#include "bevkd/detector.hpp"
#include "bevkd/distill.hpp"
#include "bevkd/gradcheck.hpp"
#include "bevkd/ops.hpp"
#include "bevkd/scene.hpp"

namespace bevkd {

namespace {

constexpr double kOpTolerance = 1e-6;
constexpr double kModelTolerance = 1e-4;

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v));
}

// Magnitudes in [0.2, 1] with random sign; keeps abs away from its kink.
Tensor signed_away_from_zero(Shape shape, std::mt19937_64& rng) {
  Tensor t = uniform(std::move(shape), rng, 0.2, 1.0);
  std::bernoulli_distribution flip(0.5);
  for (double& x : t.mutable_data())
    if (flip(rng)) x = -x;
  return t;
}

// Random linear functional so that every output coordinate contributes.
Tensor probe(const Tensor& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ops::sum(ops::mul(t, uniform(t.shape(), rng)));
}

struct Runner {
  std::vector<GradCheckCase> cases;
  double eps = 1e-6;

  void check(const std::string& name, const Tensor& x, const std::function<Tensor(const Tensor&)>& f) {
    const Tensor leaf = x.detached_copy();
    const ScalarFn fn = [&](const Tensor& v) { return probe(f(v), 977); };
    cases.push_back({name, finite_diff_check(fn, leaf, eps), kOpTolerance, leaf.numel()});
  }
};

}  // namespace

std::vector<GradCheckCase> op_gradcheck_suite() {
  std::mt19937_64 rng(20240601);
  Runner r;
  const Tensor a = uniform({3, 4}, rng), b = uniform({3, 4}, rng), m = uniform({4, 5}, rng);
  const Tensor bias = uniform({4}, rng);

  r.check("reshape", a, [](const Tensor& x) { return ops::reshape(x, {2, 6}); });
  r.check("transpose", a, [](const Tensor& x) { return ops::transpose(x); });
  const std::size_t rows[] = {2, 0, 2, 1};
  r.check("gather_rows", a, [&](const Tensor& x) { return ops::gather_rows(x, rows); });
  r.check("scatter_add_rows", a, [&](const Tensor& x) {
    const std::size_t dst[] = {1, 3, 1};
    return ops::scatter_add_rows(x, dst, 4);
  });
  r.check("concat_cols", a, [&](const Tensor& x) {
    const Tensor parts[] = {x, b, x};
    return ops::concat_cols(parts);
  });
  r.check("slice_cols", a, [](const Tensor& x) { return ops::slice_cols(x, 1, 3); });
  r.check("tile_cols", a, [](const Tensor& x) { return ops::tile_cols(x, 3); });
  r.check("select_rows", a, [&](const Tensor& x) {
    const std::uint8_t mask[] = {1, 0, 1};
    return ops::select_rows(mask, x, ops::scale(x, -2.0));
  });
  r.check("matmul.lhs", a, [&](const Tensor& x) { return ops::matmul(x, m); });
  r.check("matmul.rhs", m, [&](const Tensor& x) { return ops::matmul(a, x); });
  r.check("add", a, [&](const Tensor& x) { return ops::add(x, ops::mul(x, b)); });
  r.check("sub", a, [&](const Tensor& x) { return ops::sub(b, ops::mul(x, x)); });
  r.check("mul", a, [&](const Tensor& x) { return ops::mul(x, ops::add_scalar(x, 0.3)); });
  r.check("scale", a, [](const Tensor& x) { return ops::scale(x, -1.7); });
  r.check("add_scalar", a, [](const Tensor& x) { return ops::mul(ops::add_scalar(x, 2.5), x); });
  r.check("add_bias", bias, [&](const Tensor& x) { return ops::mul(ops::add_bias(a, x), b); });
  r.check("scale_rows", a, [](const Tensor& x) {
    const double f[] = {0.5, -2.0, 3.0};
    return ops::scale_rows(x, f);
  });
  const Tensor gw = uniform({2, 3}, rng), gv = uniform({6, 4}, rng);
  r.check("group_weighted_sum.weights", gw, [&](const Tensor& x) { return ops::group_weighted_sum(x, gv); });
  r.check("group_weighted_sum.values", gv, [&](const Tensor& x) { return ops::group_weighted_sum(gw, x); });
  r.check("sum", a, [](const Tensor& x) { return ops::mul(ops::sum(x), ops::sum(x)); });
  r.check("mean", a, [](const Tensor& x) { return ops::mul(ops::mean(x), ops::mean(x)); });
  r.check("mean_last_axis", a, [](const Tensor& x) { return ops::mean_last_axis(x); });
  r.check("tanh", a, [](const Tensor& x) { return ops::tanh(ops::scale(x, 2.0)); });
  r.check("sigmoid", a, [](const Tensor& x) { return ops::sigmoid(ops::scale(x, 3.0)); });
  r.check("softplus", a, [](const Tensor& x) { return ops::softplus(ops::scale(x, 3.0)); });
  r.check("abs", signed_away_from_zero({3, 4}, rng), [](const Tensor& x) { return ops::abs(x); });
  r.check("logit", uniform({3, 4}, rng, 0.1, 0.9), [](const Tensor& x) { return ops::logit(x); });
  const Tensor ay = signed_away_from_zero({3, 4}, rng), ax = signed_away_from_zero({3, 4}, rng);
  r.check("atan2.y", ay, [&](const Tensor& y) { return ops::atan2(y, ax); });
  r.check("atan2.x", ax, [&](const Tensor& x) { return ops::atan2(ay, x); });
  r.check("softmax.axis1", a, [](const Tensor& x) { return ops::softmax(x, 1); });
  r.check("softmax.axis0", a, [](const Tensor& x) { return ops::softmax(x, 0); });
  r.check("l2_loss", a, [&](const Tensor& x) { return ops::l2_loss(x, b); });
  r.check("cross_entropy", a, [](const Tensor& x) {
    const int t[] = {3, 0, 1};
    const double w[] = {1.0, 0.2, 0.7};
    return ops::cross_entropy(x, t, w);
  });
  const Tensor map = uniform({2, 5, 6}, rng);
  // Keep sample points off the integer lattice where bilinear weights kink.
  Tensor coords = uniform({7, 2}, rng, -0.6, 5.6);
  for (double& c : coords.mutable_data()) c = std::floor(c) + 0.1 + 0.8 * (c - std::floor(c));
  r.check("bilinear_sample.map", map, [&](const Tensor& x) { return ops::bilinear_sample(x, coords); });
  r.check("bilinear_sample.coords", coords, [&](const Tensor& x) { return ops::bilinear_sample(map, x); });
  const Tensor image = uniform({2, 5, 7}, rng), kernel = uniform({3, 2, 3, 3}, rng), cbias = uniform({3}, rng);
  for (std::size_t stride : {1u, 2u}) {
    const std::string s = std::to_string(stride);
    r.check("conv2d.input.stride" + s, image, [&](const Tensor& x) { return ops::conv2d(x, kernel, stride); });
    r.check("conv2d.kernel.stride" + s, kernel, [&](const Tensor& x) { return ops::conv2d(image, x, stride); });
  }
  r.check("add_channel_bias", cbias, [&](const Tensor& x) {
    return ops::tanh(ops::add_channel_bias(ops::conv2d(image, kernel, 1), x));
  });
  return r.cases;
}

std::vector<GradCheckCase> model_gradcheck_suite() {
  SceneConfig scene;
  scene.num_views = 2;
  scene.num_frames = 2;
  scene.num_objects = 2;
  scene.num_classes = 2;
  scene.image_height = 12;
  scene.image_width = 16;
  scene.world_extent = 6.0;
  const SceneSequence seq = generate_sequence(5, scene);

  DetectorConfig student;
  student.grid.rows = 4;
  student.grid.cols = 4;
  student.grid.extent = 6.0;
  student.grid.z_samples = {0.5, 1.5};
  student.image_height = scene.image_height;
  student.image_width = scene.image_width;
  student.backbone_hidden = 2;
  student.feat_channels = 3;
  student.embed_dim = 4;
  student.decoder_depth = 1;
  student.num_points = 2;
  student.num_queries = 3;
  student.num_classes = 2;
  student.head_hidden = 5;
  student.init_seed = 1;
  // Larger than the 0.02 default so the inherited tensors carry measurable gradient.
  student.query_init_std = student.pos_init_std = 0.5;
  DetectorConfig teacher_cfg = student;
  teacher_cfg.decoder_depth = 2;
  teacher_cfg.backbone_hidden = 3;
  teacher_cfg.init_seed = 2;
  const DetectorParams teacher = init_params(teacher_cfg);
  DetectorParams params = init_params(student);

  DistillConfig kd;
  const auto layer_map = default_layer_map(student.decoder_depth, teacher_cfg.decoder_depth);
  const auto gts = boxes_in_grid(seq.frames[1].boxes, student.grid);
  ForwardResult t_out;
  PrevBev prev;
  {
    NoGradGuard guard;
    t_out = forward_window(teacher, seq.rig, seq.frames[0], seq.frames[1]);
    // The cached previous BEV is a constant during training; pin it here too.
    prev = {forward(params, seq.rig, seq.frames[0], std::nullopt).e_bev, seq.frames[0].ego};
  }
  const ScalarFn loss = [&](const Tensor&) {
    const ForwardResult out = forward(params, seq.rig, seq.frames[1], prev);
    return total_loss(detection_loss(out.dets, gts), spatial_temporal_loss(out.record, t_out.record, layer_map),
                      response_loss(out.e_bev, t_out.e_bev), kd);
  };

  std::vector<GradCheckCase> cases;
  for (const auto& name : params.names) {
    Tensor& p = params.at(name);
    cases.push_back({name, finite_diff_check(loss, p, 1e-6), kModelTolerance, p.numel()});
  }
  return cases;
}

}  // namespace bevkd
