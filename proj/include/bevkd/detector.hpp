#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bevkd/geometry.hpp"
#include "bevkd/io.hpp"
#include "bevkd/scene.hpp"
#include "bevkd/tensor.hpp"

namespace bevkd {

enum class EmptyHitMode { kIdentity, kZero };

struct DetectorConfig {
  BEVGrid grid;
  std::size_t image_height = 32;
  std::size_t image_width = 56;
  std::size_t backbone_hidden = 6;
  std::size_t feat_channels = 8;
  std::size_t embed_dim = 16;
  std::size_t decoder_depth = 2;
  std::size_t num_points = 4;  // K
  std::size_t num_queries = 8;
  std::size_t num_classes = 4;
  std::size_t head_hidden = 32;
  double query_init_std = 0.02;   // bev_queries
  double pos_init_std = 0.02;     // pos_encoding
  double object_init_std = 1.0;   // object_queries; small values leave the queries near-symmetric
  EmptyHitMode empty_hit = EmptyHitMode::kIdentity;
  bool align_prev = true;
  std::uint64_t init_seed = 0;

  static DetectorConfig small();
  static DetectorConfig large();
  static DetectorConfig preset(const std::string& name);
  void validate() const;
  std::size_t feat_height() const { return (image_height - 1) / 2 + 1; }
  std::size_t feat_width() const { return (image_width - 1) / 2 + 1; }
};

/// Named parameter store. Order of `names` is the canonical iteration and
/// serialization order.
struct DetectorParams {
  DetectorConfig config;
  std::vector<std::string> names;
  std::map<std::string, Tensor> tensors;
  std::set<std::string> frozen;

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool is_frozen(const std::string& name) const { return frozen.count(name) != 0; }
  std::size_t num_scalars() const;
  /// Deep copy with fresh leaf tensors.
  DetectorParams clone() const;
  void zero_grad();
};

DetectorParams init_params(const DetectorConfig& config);

io::Json config_to_json(const DetectorConfig& config);
/// Missing keys keep the values of `base`.
DetectorConfig config_from_json(const io::Json& doc, const std::filesystem::path& source,
                                 const DetectorConfig& base = DetectorConfig::small());

struct DistillRecord {
  std::vector<Tensor> a_temporal;  // per layer [P x 2K]: current branch, previous branch
  std::vector<Tensor> a_spatial;   // per layer [P x V*N_ref*K], zero for non-hit views
  std::vector<std::uint8_t> view_hit;  // [P x V], shared by all layers
  std::size_t num_views = 0;
  Tensor e_bev;
};

struct Detections {
  Tensor boxes;   // [N_obj x 7] x, y, z, l, w, h, yaw
  Tensor logits;  // [N_obj x (num_classes + 1)]
  Tensor probs;
};

struct PrevBev {
  Tensor e_bev;
  EgoPose pose;
};

struct ForwardResult {
  Detections dets;
  DistillRecord record;
  Tensor e_bev;
};

/// One view through the shared backbone: [3 x H x W] -> [C_feat x H/2 x W/2].
Tensor extract_view_features(const DetectorParams& params, const Tensor& image);
std::vector<Tensor> extract_features(const DetectorParams& params, const SceneFrame& frame);

struct DeformAttnLayer {
  Tensor offset_w, offset_b;  // [C x G*K*2], [G*K*2]
  Tensor attn_w, attn_b;      // [C x G*K], [G*K]
  Tensor value_w;             // [C_in x C] applied to the value map channels
  Tensor out_w;               // [C x C]
};
DeformAttnLayer tsa_layer(const DetectorParams& params, std::size_t layer);
DeformAttnLayer sca_layer(const DetectorParams& params, std::size_t layer);

/// Single-query deformable attention. value_map is already projected.
std::pair<Tensor, Tensor> deform_attn(const Tensor& query, std::array<double, 2> ref_point, const Tensor& value_map,
                                      const DeformAttnLayer& layer);

/// Returns (E', A^temporal). `query` is Q + pos; `current` is the layer input.
std::pair<Tensor, Tensor> temporal_self_attention(const DetectorParams& params, std::size_t layer,
                                                  const Tensor& query, const Tensor& current,
                                                  const std::optional<Tensor>& aligned_prev);

/// Geometry of the spatial sampling, fixed per (grid, rig).
struct SpatialPlan {
  struct Sample {
    std::size_t pillar, ref;
    double u, v;  // feature-map coordinates
  };
  std::size_t num_pillars = 0, num_views = 0, num_ref = 0;
  std::vector<std::vector<Sample>> per_view;
  std::vector<std::uint8_t> view_hit;  // [P x V]
  std::vector<std::size_t> hit_count;  // |v_hit| per pillar
};
SpatialPlan plan_spatial(const BEVGrid& grid, const CameraRig& rig);

std::pair<Tensor, Tensor> spatial_cross_attention(const DetectorParams& params, std::size_t layer,
                                                  const Tensor& e_prime, const Tensor& pos,
                                                  const std::vector<Tensor>& features, const SpatialPlan& plan);

Detections detection_head(const DetectorParams& params, const Tensor& e_bev);

ForwardResult forward(const DetectorParams& params, const CameraRig& rig, const SceneFrame& frame,
                      const std::optional<PrevBev>& prev);
/// Runs frame t-1 without gradients to produce the cached BEV, then frame t.
ForwardResult forward_window(const DetectorParams& params, const CameraRig& rig, const SceneFrame& prev_frame,
                             const SceneFrame& frame);

struct LossConfig {
  double class_weight = 1.0;
  double box_weight = 0.2;
  double no_object_weight = 0.2;
};

/// Ground truth boxes whose centre lies inside the BEV grid.
std::vector<SceneObject> boxes_in_grid(const std::vector<SceneObject>& boxes, const BEVGrid& grid);

/// Query index matched to each ground-truth box.
std::vector<std::size_t> match_predictions(const Detections& dets, const std::vector<SceneObject>& gts);

Tensor detection_loss(const Detections& dets, const std::vector<SceneObject>& gts, const LossConfig& config = {});

void save_checkpoint(const DetectorParams& params, const std::filesystem::path& dir);
DetectorParams load_checkpoint(const std::filesystem::path& dir);

}  // namespace bevkd
