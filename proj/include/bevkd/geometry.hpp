#pragma once

// Frame conventions used everywhere in bevkd:
//   ego frame   x forward, y left, z up, origin on the ground below the rig
//   camera      x right, y down, z along the optical axis
//   image       origin at the top-left corner, u rightward, v downward;
//               continuous coordinates, pixel (i, j) covers [i, i+1) x [j, j+1)
//   BEV grid    column index runs along +x, row index along +y

#include <array>
#include <cstddef>
#include <optional>
#include <vector>

#include "bevkd/tensor.hpp"

namespace bevkd {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

Vec3 mat_vec(const Mat3& m, const Vec3& v);
Mat3 transpose(const Mat3& m);
double determinant(const Mat3& m);

struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  Mat3 rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // ego -> camera
  Vec3 translation{0, 0, 0};                 // p_cam = R p_ego + t
  std::size_t height = 1, width = 1;

  /// Camera at `position` (ego frame) looking horizontally along `yaw`.
  static Camera looking_at_yaw(double yaw, const Vec3& position, std::size_t height, std::size_t width,
                               double horizontal_fov);
};

struct CameraRig {
  std::vector<Camera> views;

  std::size_t size() const { return views.size(); }
  /// Throws ConfigError unless every rotation is orthonormal with det +1
  /// (to 1e-9), focal lengths are positive and the rig is non-empty.
  void validate() const;

  /// `num_views` cameras spaced evenly in yaw, starting forward, mounted at
  /// `mount_height` above the ego origin.
  static CameraRig surround(std::size_t num_views, std::size_t height, std::size_t width,
                            double horizontal_fov = 70.0 * 3.14159265358979323846 / 180.0,
                            double mount_height = 1.5);
};

struct BEVGrid {
  std::size_t rows = 1, cols = 1;
  double extent = 1.0;  // grid spans [-extent, extent]^2
  std::vector<double> z_samples{0.0};

  std::size_t num_pillars() const { return rows * cols; }
  std::size_t num_ref() const { return z_samples.size(); }
  double cell_x() const { return 2.0 * extent / static_cast<double>(cols); }
  double cell_y() const { return 2.0 * extent / static_cast<double>(rows); }
  std::array<double, 2> pillar_center(std::size_t pillar) const;
  /// Continuous (column, row) coordinate of an ego-frame (x, y); pillar
  /// centres land on integers.
  std::array<double, 2> grid_coord(double x, double y) const;
  void validate() const;
};

struct EgoPose {
  double x = 0.0, y = 0.0, yaw = 0.0;

  static EgoPose make(double x, double y, double yaw);
  Vec3 to_world(const Vec3& ego_point) const;
  Vec3 to_ego(const Vec3& world_point) const;
};

/// Wraps an angle into (-pi, pi].
double wrap_angle(double angle);

struct Projection {
  double u = 0.0, v = 0.0, depth = 0.0;
};

/// Pinhole projection; nullopt (a miss) when the point is behind the camera
/// or falls outside [0, W) x [0, H).
std::optional<Projection> project(const Vec3& ego_point, const Camera& camera);
/// Projection without the image-bounds test; nullopt only for depth <= 0.
std::optional<Projection> project_unbounded(const Vec3& ego_point, const Camera& camera);
Vec3 back_project(const Projection& pixel, const Camera& camera);

std::vector<Vec3> pillar_reference_points(const BEVGrid& grid, std::size_t pillar);
std::vector<std::size_t> hit_views(const BEVGrid& grid, const CameraRig& rig, std::size_t pillar);

/// Resamples a [rows*cols x C] BEV map from the previous ego frame into the
/// current one. Cells whose source lies outside the previous grid are zero.
Tensor align_previous_bev(const Tensor& prev, const EgoPose& pose_prev, const EgoPose& pose_cur,
                          const BEVGrid& grid);

}  // namespace bevkd
