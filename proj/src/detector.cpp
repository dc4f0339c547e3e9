#include "bevkd/detector.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "bevkd/errors.hpp"
#include "bevkd/hungarian.hpp"
#include "bevkd/ops.hpp"

namespace bevkd {

namespace fs = std::filesystem;
using io::Json;

// ---------------------------------------------------------------------------
// Config

DetectorConfig DetectorConfig::small() {
  DetectorConfig c;
  c.grid.rows = 16;
  c.grid.cols = 16;
  c.grid.extent = 12.0;
  c.grid.z_samples = {0.3, 0.9, 1.5, 2.1};
  c.backbone_hidden = 6;
  c.feat_channels = 8;
  c.decoder_depth = 2;
  return c;
}

DetectorConfig DetectorConfig::large() {
  DetectorConfig c = small();
  c.backbone_hidden = 12;
  c.feat_channels = 16;
  c.decoder_depth = 3;
  return c;
}

DetectorConfig DetectorConfig::preset(const std::string& name) {
  if (name == "small") return small();
  if (name == "large") return large();
  throw ConfigError("unknown model preset '" + name + "' (expected small or large)");
}

void DetectorConfig::validate() const {
  grid.validate();
  if (image_height < 3 || image_width < 3) throw ConfigError("detector: images must be at least 3x3");
  if (backbone_hidden == 0 || feat_channels == 0 || embed_dim == 0 || head_hidden == 0)
    throw ConfigError("detector: channel counts must be positive");
  if (decoder_depth == 0) throw ConfigError("detector: decoder_depth must be positive");
  if (num_points == 0) throw ConfigError("detector: num_points must be positive");
  if (num_queries == 0 || num_classes == 0) throw ConfigError("detector: num_queries and num_classes must be positive");
}

Json config_to_json(const DetectorConfig& c) {
  return Json{{"grid", {{"rows", c.grid.rows}, {"cols", c.grid.cols}, {"extent", c.grid.extent},
                        {"z_samples", c.grid.z_samples}}},
              {"image_height", c.image_height},
              {"image_width", c.image_width},
              {"backbone_hidden", c.backbone_hidden},
              {"feat_channels", c.feat_channels},
              {"embed_dim", c.embed_dim},
              {"decoder_depth", c.decoder_depth},
              {"num_points", c.num_points},
              {"num_queries", c.num_queries},
              {"num_classes", c.num_classes},
              {"head_hidden", c.head_hidden},
              {"query_init_std", c.query_init_std},
              {"pos_init_std", c.pos_init_std},
              {"object_init_std", c.object_init_std},
              {"empty_hit", c.empty_hit == EmptyHitMode::kIdentity ? "identity" : "zero"},
              {"align_prev", c.align_prev},
              {"init_seed", c.init_seed}};
}

namespace {

template <typename T>
void read_count(const Json& doc, const char* key, T& out, const fs::path& source) {
  if (!doc.contains(key)) return;
  const Json& v = doc.at(key);
  if (!io::is_count(v))
    throw FormatError("malformed config " + source.string() + ": field '" + key + "' must be a non-negative integer");
  out = static_cast<T>(v.get<unsigned long long>());
}

}  // namespace

DetectorConfig config_from_json(const Json& doc, const fs::path& source, const DetectorConfig& base) {
  if (!doc.is_object()) throw FormatError("malformed config " + source.string() + ": model section is not an object");
  DetectorConfig c = base;
  if (doc.contains("preset")) {
    if (!doc["preset"].is_string()) throw FormatError("malformed config " + source.string() + ": field 'preset'");
    c = DetectorConfig::preset(doc["preset"].get<std::string>());
  }
  if (doc.contains("grid")) {
    const Json& g = doc["grid"];
    read_count(g, "rows", c.grid.rows, source);
    read_count(g, "cols", c.grid.cols, source);
    if (g.contains("extent")) c.grid.extent = io::number(g, "extent", source);
    if (g.contains("z_samples")) {
      const Json& z = g["z_samples"];
      if (!z.is_array()) throw FormatError("malformed config " + source.string() + ": field 'z_samples'");
      c.grid.z_samples = io::numbers(g, "z_samples", z.size(), source);
    }
  }
  read_count(doc, "image_height", c.image_height, source);
  read_count(doc, "image_width", c.image_width, source);
  read_count(doc, "backbone_hidden", c.backbone_hidden, source);
  read_count(doc, "feat_channels", c.feat_channels, source);
  read_count(doc, "embed_dim", c.embed_dim, source);
  read_count(doc, "decoder_depth", c.decoder_depth, source);
  read_count(doc, "num_points", c.num_points, source);
  read_count(doc, "num_queries", c.num_queries, source);
  read_count(doc, "num_classes", c.num_classes, source);
  read_count(doc, "head_hidden", c.head_hidden, source);
  read_count(doc, "init_seed", c.init_seed, source);
  if (doc.contains("query_init_std")) c.query_init_std = io::number(doc, "query_init_std", source);
  if (doc.contains("pos_init_std")) c.pos_init_std = io::number(doc, "pos_init_std", source);
  if (doc.contains("object_init_std")) c.object_init_std = io::number(doc, "object_init_std", source);
  if (doc.contains("empty_hit")) {
    const Json& v = doc["empty_hit"];
    if (v == "identity") {
      c.empty_hit = EmptyHitMode::kIdentity;
    } else if (v == "zero") {
      c.empty_hit = EmptyHitMode::kZero;
    } else {
      throw FormatError("malformed config " + source.string() + ": field 'empty_hit' must be identity or zero");
    }
  }
  if (doc.contains("align_prev")) {
    if (!doc["align_prev"].is_boolean())
      throw FormatError("malformed config " + source.string() + ": field 'align_prev' must be a boolean");
    c.align_prev = doc["align_prev"].get<bool>();
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

const Tensor& DetectorParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& DetectorParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t DetectorParams::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors) n += t.numel();
  return n;
}

DetectorParams DetectorParams::clone() const {
  DetectorParams out;
  out.config = config;
  out.names = names;
  out.frozen = frozen;
  for (const auto& [name, t] : tensors) {
    Tensor copy = t.detached_copy();
    copy.set_requires_grad(true);
    out.tensors.emplace(name, copy);
  }
  return out;
}

void DetectorParams::zero_grad() {
  for (auto& [_, t] : tensors) t.zero_grad();
}

namespace {

std::string layer_name(std::size_t layer, const char* block, const char* field) {
  return "layers." + std::to_string(layer) + "." + block + "." + field;
}

class ParamBuilder {
 public:
  ParamBuilder(DetectorParams& p, std::uint64_t seed) : p_(p), rng_(seed) {}

  void normal(const std::string& name, Shape shape, double stddev) {
    std::normal_distribution<double> d(0.0, stddev);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = d(rng_);
    add(name, std::move(shape), std::move(v));
  }
  void uniform(const std::string& name, Shape shape, double half_width) {
    std::uniform_real_distribution<double> d(-half_width, half_width);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = d(rng_);
    add(name, std::move(shape), std::move(v));
  }
  void constant(const std::string& name, Shape shape, std::vector<double> values) {
    add(name, std::move(shape), std::move(values));
  }

 private:
  void add(const std::string& name, Shape shape, std::vector<double> v) {
    p_.names.push_back(name);
    p_.tensors.emplace(name, Tensor(std::move(shape), std::move(v), true));
  }
  DetectorParams& p_;
  std::mt19937_64 rng_;
};

double softplus_inverse(double y) { return std::log(std::expm1(y)); }

}  // namespace

DetectorParams init_params(const DetectorConfig& config) {
  config.validate();
  DetectorParams p;
  p.config = config;
  ParamBuilder b(p, config.init_seed);
  const std::size_t c = config.embed_dim, k = config.num_points, r = config.grid.num_ref();
  const std::size_t pillars = config.grid.num_pillars();
  const auto fan = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

  b.normal("backbone.conv1.w", {config.backbone_hidden, SceneConfig::kImageChannels, 3, 3},
           2.0 * fan(SceneConfig::kImageChannels * 9));
  b.constant("backbone.conv1.b", {config.backbone_hidden}, std::vector<double>(config.backbone_hidden, 0.0));
  b.normal("backbone.conv2.w", {config.feat_channels, config.backbone_hidden, 3, 3},
           fan(config.backbone_hidden * 9));
  b.constant("backbone.conv2.b", {config.feat_channels}, std::vector<double>(config.feat_channels, 0.0));
  b.normal("bev_queries", {pillars, c}, config.query_init_std);
  b.normal("pos_encoding", {pillars, c}, config.pos_init_std);
  for (std::size_t l = 0; l < config.decoder_depth; ++l) {
    b.normal(layer_name(l, "tsa", "offset_w"), {c, 2 * k}, 0.01);
    b.uniform(layer_name(l, "tsa", "offset_b"), {2 * k}, 0.5);
    b.normal(layer_name(l, "tsa", "attn_w"), {c, k}, 0.01);
    b.constant(layer_name(l, "tsa", "attn_b"), {k}, std::vector<double>(k, 0.0));
    b.normal(layer_name(l, "tsa", "value_w"), {c, c}, fan(c));
    b.normal(layer_name(l, "tsa", "out_w"), {c, c}, fan(c));
    b.normal(layer_name(l, "sca", "offset_w"), {c, 2 * r * k}, 0.01);
    b.uniform(layer_name(l, "sca", "offset_b"), {2 * r * k}, 0.5);
    b.normal(layer_name(l, "sca", "attn_w"), {c, r * k}, 0.01);
    b.constant(layer_name(l, "sca", "attn_b"), {r * k}, std::vector<double>(r * k, 0.0));
    b.normal(layer_name(l, "sca", "value_w"), {config.feat_channels, c}, fan(config.feat_channels));
    b.normal(layer_name(l, "sca", "out_w"), {c, c}, fan(c));
  }
  b.normal("object_queries", {config.num_queries, c}, config.object_init_std);
  b.normal("head.wq", {c, c}, fan(c));
  b.normal("head.wk", {c, c}, fan(c));
  b.normal("head.wv", {c, c}, fan(c));
  b.normal("head.w1", {c, config.head_hidden}, fan(c));
  b.constant("head.b1", {config.head_hidden}, std::vector<double>(config.head_hidden, 0.0));
  b.normal("head.w_reg", {config.head_hidden, 8}, 0.1 * fan(config.head_hidden));
  // z, then length/width/height near typical object sizes, yaw along +x.
  b.constant("head.b_reg", {8},
             {0.0, 0.0, 0.9, softplus_inverse(3.0), softplus_inverse(1.5), softplus_inverse(1.8), 0.0, 1.0});
  b.normal("head.w_cls", {config.head_hidden, config.num_classes + 1}, 0.1 * fan(config.head_hidden));
  b.constant("head.b_cls", {config.num_classes + 1}, std::vector<double>(config.num_classes + 1, 0.0));
  return p;
}

// ---------------------------------------------------------------------------
// Stage I

Tensor extract_view_features(const DetectorParams& params, const Tensor& image) {
  const auto& cfg = params.config;
  if (image.rank() != 3 || image.dim(0) != SceneConfig::kImageChannels || image.dim(1) != cfg.image_height ||
      image.dim(2) != cfg.image_width) {
    throw DimensionError("extract_features: image " + shape_str(image.shape()) + " does not match the configured [" +
                         std::to_string(SceneConfig::kImageChannels) + "x" + std::to_string(cfg.image_height) + "x" +
                         std::to_string(cfg.image_width) + "]");
  }
  Tensor h = ops::tanh(ops::add_channel_bias(ops::conv2d(image, params.at("backbone.conv1.w"), 1),
                                             params.at("backbone.conv1.b")));
  return ops::tanh(
      ops::add_channel_bias(ops::conv2d(h, params.at("backbone.conv2.w"), 2), params.at("backbone.conv2.b")));
}

std::vector<Tensor> extract_features(const DetectorParams& params, const SceneFrame& frame) {
  std::vector<Tensor> out;
  out.reserve(frame.images.size());
  for (const Tensor& img : frame.images) out.push_back(extract_view_features(params, img));
  return out;
}

// ---------------------------------------------------------------------------
// Attention

namespace {

DeformAttnLayer load_layer(const DetectorParams& p, std::size_t layer, const char* block) {
  if (layer >= p.config.decoder_depth)
    throw ContractError("layer " + std::to_string(layer) + " out of range for decoder depth " +
                        std::to_string(p.config.decoder_depth));
  return {p.at(layer_name(layer, block, "offset_w")), p.at(layer_name(layer, block, "offset_b")),
          p.at(layer_name(layer, block, "attn_w")),   p.at(layer_name(layer, block, "attn_b")),
          p.at(layer_name(layer, block, "value_w")),  p.at(layer_name(layer, block, "out_w"))};
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return ops::add_bias(ops::matmul(x, w), b); }

// [P x C] embedding -> [C x rows x cols] map.
Tensor bev_map(const Tensor& rows_by_channel, const BEVGrid& grid) {
  return ops::reshape(ops::transpose(rows_by_channel), {rows_by_channel.dim(1), grid.rows, grid.cols});
}

}  // namespace

DeformAttnLayer tsa_layer(const DetectorParams& params, std::size_t layer) { return load_layer(params, layer, "tsa"); }
DeformAttnLayer sca_layer(const DetectorParams& params, std::size_t layer) { return load_layer(params, layer, "sca"); }

std::pair<Tensor, Tensor> deform_attn(const Tensor& query, std::array<double, 2> ref_point, const Tensor& value_map,
                                      const DeformAttnLayer& layer) {
  if (query.rank() != 2 || query.dim(0) != 1) throw DimensionError("deform_attn: query must be [1 x C]");
  const std::size_t k = layer.attn_w.dim(1);
  if (layer.offset_w.dim(1) != 2 * k) throw DimensionError("deform_attn: expects a single-group layer");
  const Tensor offsets = ops::reshape(linear(query, layer.offset_w, layer.offset_b), {k, 2});
  std::vector<double> base(2 * k);
  for (std::size_t i = 0; i < k; ++i) {
    base[2 * i] = ref_point[0];
    base[2 * i + 1] = ref_point[1];
  }
  const Tensor sampled = ops::bilinear_sample(value_map, ops::add(offsets, Tensor(Shape{k, 2}, std::move(base))));
  const Tensor attn = ops::softmax(linear(query, layer.attn_w, layer.attn_b), 1);
  const Tensor out = ops::matmul(ops::group_weighted_sum(attn, sampled), layer.out_w);
  return {out, ops::reshape(attn, {k})};
}

std::pair<Tensor, Tensor> temporal_self_attention(const DetectorParams& params, std::size_t layer,
                                                  const Tensor& query, const Tensor& current,
                                                  const std::optional<Tensor>& aligned_prev) {
  const BEVGrid& grid = params.config.grid;
  const std::size_t n = grid.num_pillars(), k = params.config.num_points;
  const DeformAttnLayer w = tsa_layer(params, layer);

  std::vector<double> base(2 * n * k);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t i = 0; i < k; ++i) {
      base[2 * (p * k + i)] = static_cast<double>(p % grid.cols);
      base[2 * (p * k + i) + 1] = static_cast<double>(p / grid.cols);
    }
  const Tensor coords =
      ops::add(ops::reshape(linear(query, w.offset_w, w.offset_b), {n * k, 2}), Tensor(Shape{n * k, 2}, std::move(base)));
  const Tensor attn = ops::softmax(linear(query, w.attn_w, w.attn_b), 1);

  const Tensor cur_map = bev_map(ops::matmul(current, w.value_w), grid);
  const Tensor agg_cur = ops::group_weighted_sum(attn, ops::bilinear_sample(cur_map, coords));
  Tensor agg_prev = agg_cur;  // first frame: the previous branch sees the current map
  if (aligned_prev) {
    const Tensor prev_map = bev_map(ops::matmul(*aligned_prev, w.value_w), grid);
    agg_prev = ops::group_weighted_sum(attn, ops::bilinear_sample(prev_map, coords));
  }
  const Tensor e_prime = ops::matmul(ops::add(agg_cur, agg_prev), w.out_w);
  const Tensor branches[] = {attn, attn};
  return {e_prime, ops::concat_cols(branches)};
}

SpatialPlan plan_spatial(const BEVGrid& grid, const CameraRig& rig) {
  SpatialPlan plan;
  plan.num_pillars = grid.num_pillars();
  plan.num_views = rig.size();
  plan.num_ref = grid.num_ref();
  plan.per_view.resize(plan.num_views);
  plan.view_hit.assign(plan.num_pillars * plan.num_views, 0);
  plan.hit_count.assign(plan.num_pillars, 0);
  for (std::size_t p = 0; p < plan.num_pillars; ++p) {
    const auto pts = pillar_reference_points(grid, p);
    for (std::size_t v = 0; v < plan.num_views; ++v) {
      std::vector<SpatialPlan::Sample> hits;
      for (std::size_t j = 0; j < pts.size(); ++j) {
        const auto px = project(pts[j], rig.views[v]);
        // Pixel centres sit at integer + 0.5; the stride-2 feature pixel j
        // is centred on input pixel 2j.
        if (px) hits.push_back({p, j, (px->u - 0.5) / 2.0, (px->v - 0.5) / 2.0});
      }
      if (hits.empty()) continue;
      plan.view_hit[p * plan.num_views + v] = 1;
      ++plan.hit_count[p];
      plan.per_view[v].insert(plan.per_view[v].end(), hits.begin(), hits.end());
    }
  }
  return plan;
}

std::pair<Tensor, Tensor> spatial_cross_attention(const DetectorParams& params, std::size_t layer,
                                                  const Tensor& e_prime, const Tensor& pos,
                                                  const std::vector<Tensor>& features, const SpatialPlan& plan) {
  const auto& cfg = params.config;
  const std::size_t n = cfg.grid.num_pillars(), k = cfg.num_points, r = cfg.grid.num_ref(), c = cfg.embed_dim;
  if (features.size() != plan.num_views || plan.num_pillars != n || plan.num_ref != r)
    throw DimensionError("spatial_cross_attention: features/plan do not match the grid and rig");
  const DeformAttnLayer w = sca_layer(params, layer);

  const Tensor query = ops::add(e_prime, pos);
  const Tensor offsets = ops::reshape(linear(query, w.offset_w, w.offset_b), {n * r * k, 2});
  const Tensor attn = ops::softmax(ops::reshape(linear(query, w.attn_w, w.attn_b), {n * r, k}), 1);
  const Tensor value_t = ops::transpose(w.value_w);

  Tensor acc;
  for (std::size_t v = 0; v < plan.num_views; ++v) {
    const auto& samples = plan.per_view[v];
    if (samples.empty()) continue;
    const Tensor& f = features[v];
    const std::size_t fh = f.dim(1), fw = f.dim(2);
    const Tensor value_map =
        ops::reshape(ops::matmul(value_t, ops::reshape(f, {f.dim(0), fh * fw})), {c, fh, fw});
    const std::size_t m = samples.size();
    std::vector<std::size_t> offset_rows(m * k), group_rows(m), pillar_rows(m);
    std::vector<double> base(2 * m * k);
    for (std::size_t s = 0; s < m; ++s) {
      const auto& smp = samples[s];
      group_rows[s] = smp.pillar * r + smp.ref;
      pillar_rows[s] = smp.pillar;
      for (std::size_t i = 0; i < k; ++i) {
        offset_rows[s * k + i] = group_rows[s] * k + i;
        base[2 * (s * k + i)] = smp.u;
        base[2 * (s * k + i) + 1] = smp.v;
      }
    }
    const Tensor coords = ops::add(ops::gather_rows(offsets, offset_rows), Tensor(Shape{m * k, 2}, std::move(base)));
    const Tensor agg =
        ops::group_weighted_sum(ops::gather_rows(attn, group_rows), ops::bilinear_sample(value_map, coords));
    const Tensor scattered = ops::scatter_add_rows(agg, pillar_rows, n);
    acc = acc.defined() ? ops::add(acc, scattered) : scattered;
  }
  if (!acc.defined()) acc = Tensor(Shape{n, c}, 0.0);

  std::vector<double> inv(n, 0.0);
  std::vector<std::uint8_t> hit_mask(n, 0);
  for (std::size_t p = 0; p < n; ++p) {
    if (plan.hit_count[p] == 0) continue;
    inv[p] = 1.0 / static_cast<double>(plan.hit_count[p]);
    hit_mask[p] = 1;
  }
  Tensor out = ops::matmul(ops::scale_rows(acc, inv), w.out_w);
  if (cfg.empty_hit == EmptyHitMode::kIdentity) out = ops::select_rows(hit_mask, out, e_prime);

  const std::size_t group = r * k, views = plan.num_views;
  std::vector<double> mask(n * views * group, 0.0);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t v = 0; v < views; ++v)
      if (plan.view_hit[p * views + v])
        std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>((p * views + v) * group), group, 1.0);
  const Tensor a_spatial =
      ops::mul(ops::tile_cols(ops::reshape(attn, {n, group}), views), Tensor(Shape{n, views * group}, std::move(mask)));
  return {out, a_spatial};
}

// ---------------------------------------------------------------------------
// Stage IV

Detections detection_head(const DetectorParams& params, const Tensor& e_bev) {
  const auto& cfg = params.config;
  const BEVGrid& grid = cfg.grid;
  const std::size_t n = grid.num_pillars();
  const double extent = grid.extent;
  const Tensor& q = params.at("object_queries");

  const Tensor keys = ops::matmul(ops::add(e_bev, params.at("pos_encoding")), params.at("head.wk"));
  const Tensor scores = ops::scale(ops::matmul(ops::matmul(q, params.at("head.wq")), ops::transpose(keys)),
                                   1.0 / std::sqrt(static_cast<double>(cfg.embed_dim)));
  const Tensor attn = ops::softmax(scores, 1);
  const Tensor ctx = ops::matmul(attn, ops::matmul(e_bev, params.at("head.wv")));
  const Tensor h = ops::tanh(linear(ops::add(q, ctx), params.at("head.w1"), params.at("head.b1")));
  const Tensor reg = linear(h, params.at("head.w_reg"), params.at("head.b_reg"));
  const Tensor logits = linear(h, params.at("head.w_cls"), params.at("head.b_cls"));

  std::vector<double> centers(2 * n);
  for (std::size_t p = 0; p < n; ++p) {
    const auto xy = grid.pillar_center(p);
    centers[2 * p] = xy[0];
    centers[2 * p + 1] = xy[1];
  }
  // The attention centroid anchors (x, y); the regression moves it in logit
  // space so the result stays inside the grid.
  const Tensor centroid = ops::matmul(attn, Tensor(Shape{n, 2}, std::move(centers)));
  const Tensor unit = ops::add_scalar(ops::scale(centroid, 0.5 / extent), 0.5);
  const Tensor xy = ops::add_scalar(
      ops::scale(ops::sigmoid(ops::add(ops::logit(unit), ops::slice_cols(reg, 0, 2))), 2.0 * extent), -extent);
  const Tensor parts[] = {xy, ops::slice_cols(reg, 2, 3), ops::softplus(ops::slice_cols(reg, 3, 6)),
                          ops::atan2(ops::slice_cols(reg, 6, 7), ops::slice_cols(reg, 7, 8))};
  return {ops::concat_cols(parts), logits, ops::softmax(logits, 1)};
}

// ---------------------------------------------------------------------------
// Composition

ForwardResult forward(const DetectorParams& params, const CameraRig& rig, const SceneFrame& frame,
                      const std::optional<PrevBev>& prev) {
  const auto& cfg = params.config;
  if (frame.images.size() != rig.size())
    throw DimensionError("forward: frame has " + std::to_string(frame.images.size()) + " images for a " +
                         std::to_string(rig.size()) + "-view rig");
  const auto features = extract_features(params, frame);
  const SpatialPlan plan = plan_spatial(cfg.grid, rig);

  std::optional<Tensor> aligned;
  if (prev) {
    const Tensor e = prev->e_bev.detached_copy();
    aligned = cfg.align_prev ? align_previous_bev(e, prev->pose, frame.ego, cfg.grid) : e;
  }

  ForwardResult out;
  out.record.view_hit = plan.view_hit;
  out.record.num_views = plan.num_views;
  const Tensor& pos = params.at("pos_encoding");
  Tensor x = params.at("bev_queries");
  for (std::size_t l = 0; l < cfg.decoder_depth; ++l) {
    auto [e_prime, a_t] = temporal_self_attention(params, l, ops::add(x, pos), x, aligned);
    auto [e_bev, a_s] = spatial_cross_attention(params, l, e_prime, pos, features, plan);
    out.record.a_temporal.push_back(a_t);
    out.record.a_spatial.push_back(a_s);
    x = e_bev;
  }
  out.record.e_bev = x;
  out.e_bev = x;
  out.dets = detection_head(params, x);
  return out;
}

ForwardResult forward_window(const DetectorParams& params, const CameraRig& rig, const SceneFrame& prev_frame,
                             const SceneFrame& frame) {
  Tensor prev_bev;
  {
    NoGradGuard guard;
    prev_bev = forward(params, rig, prev_frame, std::nullopt).e_bev;
  }
  return forward(params, rig, frame, PrevBev{prev_bev, prev_frame.ego});
}

// ---------------------------------------------------------------------------
// Loss

std::vector<SceneObject> boxes_in_grid(const std::vector<SceneObject>& boxes, const BEVGrid& grid) {
  std::vector<SceneObject> out;
  for (const auto& b : boxes)
    if (std::abs(b.center[0]) < grid.extent && std::abs(b.center[1]) < grid.extent) out.push_back(b);
  return out;
}

std::vector<std::size_t> match_predictions(const Detections& dets, const std::vector<SceneObject>& gts) {
  const std::size_t nq = dets.boxes.dim(0), classes = dets.probs.dim(1);
  const auto probs = dets.probs.data();
  const auto boxes = dets.boxes.data();
  std::vector<double> cost(gts.size() * nq);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const auto cls = static_cast<std::size_t>(gts[g].class_id);
    if (cls + 1 >= classes) throw ContractError("detection_loss: ground-truth class out of range");
    for (std::size_t q = 0; q < nq; ++q) {
      const double pr = std::max(probs[q * classes + cls], 1e-300);
      cost[g * nq + q] = -std::log(pr) + std::abs(boxes[q * 7] - gts[g].center[0]) +
                         std::abs(boxes[q * 7 + 1] - gts[g].center[1]);
    }
  }
  return hungarian(cost, gts.size(), nq);
}

Tensor detection_loss(const Detections& dets, const std::vector<SceneObject>& gts, const LossConfig& config) {
  const std::size_t nq = dets.boxes.dim(0), classes = dets.logits.dim(1);
  const auto match = match_predictions(dets, gts);
  std::vector<int> targets(nq, static_cast<int>(classes - 1));
  std::vector<double> weights(nq, config.no_object_weight);
  std::vector<std::size_t> rows;
  std::vector<double> target_boxes;
  const auto boxes = dets.boxes.data();
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const std::size_t q = match[g];
    if (q >= nq) continue;
    targets[q] = gts[g].class_id;
    weights[q] = 1.0;
    rows.push_back(q);
    const auto& b = gts[g];
    const double yaw = boxes[q * 7 + 6];
    target_boxes.insert(target_boxes.end(), {b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2],
                                             yaw - wrap_angle(yaw - b.yaw)});
  }
  Tensor loss = ops::scale(ops::cross_entropy(dets.logits, targets, weights), config.class_weight);
  if (!rows.empty()) {
    const std::size_t m = rows.size();
    const Tensor diff = ops::sub(ops::gather_rows(dets.boxes, rows), Tensor(Shape{m, 7}, std::move(target_boxes)));
    loss = ops::add(loss, ops::scale(ops::sum(ops::abs(diff)), config.box_weight / static_cast<double>(m)));
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const DetectorParams& params, const fs::path& dir) {
  fs::create_directories(dir);
  Json entries = Json::array();
  for (const auto& name : params.names) {
    const Tensor& t = params.at(name);
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"file", name + ".f64"}});
    io::write_f64(dir / (name + ".f64"), t.data());
  }
  Json frozen = Json::array();
  for (const auto& name : params.names)
    if (params.is_frozen(name)) frozen.push_back(name);
  io::write_json(dir / "manifest.json", Json{{"schema_version", 1},
                                             {"config", config_to_json(params.config)},
                                             {"params", entries},
                                             {"frozen_mask", frozen}});
}

DetectorParams load_checkpoint(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.json";
  if (!fs::exists(manifest)) throw FormatError("missing checkpoint manifest " + manifest.string());
  const Json doc = io::read_json(manifest);
  if (io::number(doc, "schema_version", manifest) != 1.0)
    throw FormatError("malformed manifest " + manifest.string() + ": unsupported schema_version");
  const DetectorConfig cfg = config_from_json(io::field(doc, "config", manifest), manifest);
  DetectorParams p = init_params(cfg);
  const Json& entries = io::field(doc, "params", manifest);
  if (!entries.is_array() || entries.size() != p.names.size())
    throw FormatError("shape mismatch in " + manifest.string() + ": expected " + std::to_string(p.names.size()) +
                      " parameters");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Json& e = entries[i];
    const Json& name = io::field(e, "name", manifest);
    if (!name.is_string() || name.get<std::string>() != p.names[i])
      throw FormatError("malformed manifest " + manifest.string() + ": parameter " + std::to_string(i) +
                        " should be '" + p.names[i] + "'");
    Tensor& t = p.at(p.names[i]);
    const Json& shape = io::field(e, "shape", manifest);
    if (!shape.is_array() || shape.get<Shape>() != t.shape())
      throw FormatError("shape mismatch in " + manifest.string() + ": parameter '" + p.names[i] + "' expected " +
                        shape_str(t.shape()));
    const auto values = io::read_f64(dir / (p.names[i] + ".f64"), t.numel());
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
  for (const Json& f : io::field(doc, "frozen_mask", manifest)) {
    if (!f.is_string() || !p.tensors.count(f.get<std::string>()))
      throw FormatError("malformed manifest " + manifest.string() + ": frozen_mask names an unknown parameter");
    p.frozen.insert(f.get<std::string>());
  }
  return p;
}

}  // namespace bevkd
