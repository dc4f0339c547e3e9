#include "bevkd/distill.hpp"

#include <algorithm>
#include <cctype>

#include "bevkd/errors.hpp"
#include "bevkd/ops.hpp"

namespace bevkd {

InheritMode parse_inherit_mode(const std::string& text) {
  std::string t = text;
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  std::replace(t.begin(), t.end(), '-', '_');
  if (t == "INHERIT_AND_FREEZE") return InheritMode::kInheritAndFreeze;
  if (t == "INIT_ONLY") return InheritMode::kInitOnly;
  if (t == "OFF") return InheritMode::kOff;
  throw ConfigError("unknown inherit_mode '" + text + "' (expected INHERIT_AND_FREEZE, INIT_ONLY or OFF)");
}

std::string to_string(InheritMode mode) {
  switch (mode) {
    case InheritMode::kInheritAndFreeze: return "INHERIT_AND_FREEZE";
    case InheritMode::kInitOnly: return "INIT_ONLY";
    case InheritMode::kOff: return "OFF";
  }
  return "OFF";
}

bool DistillConfig::is_noop() const {
  return !enable_spatial_temporal && !enable_response && effective_inherit_mode() == InheritMode::kOff;
}

void DistillConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("distill: lambda must be non-negative");
}

std::vector<std::size_t> default_layer_map(std::size_t student_depth, std::size_t teacher_depth) {
  if (student_depth == 0 || teacher_depth == 0) throw ConfigError("layer map needs positive depths");
  std::vector<std::size_t> map(student_depth);
  for (std::size_t k = 1; k <= student_depth; ++k) map[k - 1] = (k * teacher_depth + student_depth - 1) / student_depth - 1;
  return map;
}

namespace {

Tensor constant(const Tensor& t) { return t.detached_copy(); }

void check_pair(const Tensor& s, const Tensor& t, const char* kind, std::size_t ls, std::size_t lt) {
  if (s.shape() != t.shape())
    throw ConfigError(std::string("distill: ") + kind + " attention of student layer " + std::to_string(ls) + " " +
                      shape_str(s.shape()) + " does not match teacher layer " + std::to_string(lt) + " " +
                      shape_str(t.shape()));
}

}  // namespace

Tensor spatial_temporal_loss(const DistillRecord& student, const DistillRecord& teacher,
                             const std::vector<std::size_t>& layer_map) {
  if (layer_map.size() != student.a_temporal.size() || student.a_temporal.size() != student.a_spatial.size())
    throw ConfigError("distill: layer map covers " + std::to_string(layer_map.size()) + " layers, student has " +
                      std::to_string(student.a_temporal.size()));
  Tensor total;
  for (std::size_t ls = 0; ls < layer_map.size(); ++ls) {
    const std::size_t lt = layer_map[ls];
    if (lt >= teacher.a_temporal.size() || lt >= teacher.a_spatial.size())
      throw ConfigError("distill: student layer " + std::to_string(ls) + " maps to missing teacher layer " +
                        std::to_string(lt));
    check_pair(student.a_temporal[ls], teacher.a_temporal[lt], "temporal", ls, lt);
    check_pair(student.a_spatial[ls], teacher.a_spatial[lt], "spatial", ls, lt);
    const Tensor term = ops::add(ops::l2_loss(student.a_temporal[ls], constant(teacher.a_temporal[lt])),
                                 ops::l2_loss(student.a_spatial[ls], constant(teacher.a_spatial[lt])));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total.defined() ? total : Tensor::scalar(0.0);
}

Tensor bev_response(const Tensor& e_bev) {
  if (e_bev.rank() != 2) throw DimensionError("bev_response: expects [pillars x channels], got " + shape_str(e_bev.shape()));
  return ops::mean_last_axis(ops::abs(e_bev));
}

Tensor response_loss(const Tensor& student_e_bev, const Tensor& teacher_e_bev) {
  if (student_e_bev.shape() != teacher_e_bev.shape())
    throw ConfigError("distill: student BEV " + shape_str(student_e_bev.shape()) + " does not match teacher BEV " +
                      shape_str(teacher_e_bev.shape()));
  return ops::l2_loss(bev_response(student_e_bev), constant(bev_response(teacher_e_bev)));
}

Tensor total_loss(const Tensor& l_original, const Tensor& l_spatial_temp, const Tensor& l_response,
                  const DistillConfig& config) {
  config.validate();
  Tensor kd;
  if (config.enable_spatial_temporal && l_spatial_temp.defined()) kd = l_spatial_temp;
  if (config.enable_response && l_response.defined()) kd = kd.defined() ? ops::add(kd, l_response) : l_response;
  if (!kd.defined()) return l_original;
  return ops::add(l_original, ops::scale(kd, config.lambda));
}

void apply_weight_inheriting(DetectorParams& student, const DetectorParams& teacher, InheritMode mode,
                             bool inherit_object_queries) {
  if (mode == InheritMode::kOff) return;
  const auto& gs = student.config.grid;
  const auto& gt = teacher.config.grid;
  if (gs.rows != gt.rows || gs.cols != gt.cols || student.config.embed_dim != teacher.config.embed_dim)
    throw ConfigError("weight-inheriting needs equal BEV grids and embedding widths: student " +
                      std::to_string(gs.rows) + "x" + std::to_string(gs.cols) + "x" +
                      std::to_string(student.config.embed_dim) + ", teacher " + std::to_string(gt.rows) + "x" +
                      std::to_string(gt.cols) + "x" + std::to_string(teacher.config.embed_dim));
  std::vector<std::string> names{"bev_queries", "pos_encoding"};
  if (inherit_object_queries) {
    if (student.config.num_queries != teacher.config.num_queries)
      throw ConfigError("inheriting object queries needs equal query counts");
    names.push_back("object_queries");
  }
  for (const auto& name : names) {
    const auto src = teacher.at(name).data();
    auto dst = student.at(name).mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
    if (mode == InheritMode::kInheritAndFreeze) student.frozen.insert(name);
  }
}

}  // namespace bevkd
