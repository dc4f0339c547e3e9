#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "bevkd/geometry.hpp"
#include "bevkd/tensor.hpp"

namespace bevkd {

struct SceneObject {
  int class_id = 0;
  Vec3 center{0, 0, 0};  // metres; world frame in generation, ego frame in frames
  Vec3 size{1, 1, 1};    // length, width, height
  double yaw = 0.0;
  std::array<double, 2> velocity{0, 0};  // m/s

  std::array<Vec3, 8> corners() const;
};

struct SceneConfig {
  std::size_t num_objects = 6;
  std::size_t num_frames = 8;
  std::size_t num_views = 6;
  std::size_t image_height = 32;
  std::size_t image_width = 56;
  std::size_t num_classes = 4;
  double world_extent = 12.0;  // objects stay inside [-extent, extent]^2 of the world
  double ego_speed_min = 0.0;
  double ego_speed_max = 1.5;
  double object_speed_max = 1.5;
  double frame_dt = 0.5;
  double min_ego_clearance = 3.0;
  std::size_t max_placement_attempts = 2000;

  static constexpr std::size_t kImageChannels = 3;
  void validate() const;
};

struct SceneFrame {
  std::size_t t = 0;
  EgoPose ego;
  std::vector<Tensor> images;       // one [3 x H x W] per view
  std::vector<SceneObject> boxes;   // ego frame at t
};

struct SceneSequence {
  CameraRig rig;
  SceneConfig config;
  std::vector<SceneFrame> frames;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::uint64_t seed = 0;
  std::vector<SceneSequence> sequences;
};

/// Canonical box dimensions and colour for a class id (cycled beyond 4).
Vec3 class_size(int class_id);
std::array<double, 3> class_color(int class_id);

/// Position after `dt` seconds at constant velocity.
SceneObject advance(const SceneObject& obj, double dt);
SceneObject world_to_ego(const SceneObject& obj, const EgoPose& ego);

SceneSequence generate_sequence(std::uint64_t seed, const SceneConfig& config);
Dataset generate_dataset(std::uint64_t seed, const SceneConfig& config, std::size_t num_sequences);

/// Rasterises `objects` (ego frame) into a [3 x H x W] image for `camera`.
/// Each object paints the convex hull of its in-front corner projections in
/// its class colour; nearer objects (by centre distance) win per pixel.
Tensor render_view(const std::vector<SceneObject>& objects, const Camera& camera);
Tensor render_background(const Camera& camera);

void save_sequence(const SceneSequence& seq, const std::filesystem::path& dir);
SceneSequence load_sequence(const std::filesystem::path& dir);
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
/// Reads a multi-sequence dataset (dataset.json) or a single sequence
/// directory (manifest.json).
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace bevkd
