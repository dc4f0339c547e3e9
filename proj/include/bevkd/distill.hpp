#pragma once

#include <string>
#include <vector>

#include "bevkd/detector.hpp"

namespace bevkd {

enum class InheritMode { kInheritAndFreeze, kInitOnly, kOff };

InheritMode parse_inherit_mode(const std::string& text);
std::string to_string(InheritMode mode);

struct DistillConfig {
  double lambda = 1e-2;
  bool enable_spatial_temporal = true;
  bool enable_response = true;
  bool enable_weight_inherit = true;
  InheritMode inherit_mode = InheritMode::kInheritAndFreeze;
  bool inherit_object_queries = false;  // experimental
  std::vector<std::size_t> layer_map;   // student layer -> teacher layer; empty means default

  /// Everything off: the student trains exactly as without a teacher.
  bool is_noop() const;
  InheritMode effective_inherit_mode() const { return enable_weight_inherit ? inherit_mode : InheritMode::kOff; }
  void validate() const;
};

/// Student layer k (1-based) reads teacher layer ceil(k * D_T / D_S); returned 0-based.
std::vector<std::size_t> default_layer_map(std::size_t student_depth, std::size_t teacher_depth);

/// Sum over mapped layers of mean-squared attention differences, temporal and
/// spatial. Teacher tensors are used as constants.
Tensor spatial_temporal_loss(const DistillRecord& student, const DistillRecord& teacher,
                             const std::vector<std::size_t>& layer_map);

/// Per-pillar channel mean of |E_BEV|: [P x C] -> [P].
Tensor bev_response(const Tensor& e_bev);
Tensor response_loss(const Tensor& student_e_bev, const Tensor& teacher_e_bev);

/// l_original + lambda * (l_st + l_resp). Undefined tensors or disabled terms
/// contribute nothing.
Tensor total_loss(const Tensor& l_original, const Tensor& l_spatial_temp, const Tensor& l_response,
                  const DistillConfig& config);

void apply_weight_inheriting(DetectorParams& student, const DetectorParams& teacher, InheritMode mode,
                             bool inherit_object_queries = false);

}  // namespace bevkd
