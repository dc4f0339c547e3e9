#include "bevkd/geometry.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "bevkd/errors.hpp"
#include "bevkd/ops.hpp"

namespace bevkd {

Vec3 mat_vec(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

Mat3 transpose(const Mat3& m) { return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]}; }

double determinant(const Mat3& m) {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Camera Camera::looking_at_yaw(double yaw, const Vec3& position, std::size_t height, std::size_t width,
                              double horizontal_fov) {
  Camera cam;
  const double c = std::cos(yaw), s = std::sin(yaw);
  // Rows are the camera axes expressed in the ego frame: right, down, forward.
  cam.rotation = {s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0};
  const Vec3 rp = mat_vec(cam.rotation, position);
  cam.translation = {-rp[0], -rp[1], -rp[2]};
  cam.width = width;
  cam.height = height;
  cam.fx = (static_cast<double>(width) / 2.0) / std::tan(horizontal_fov / 2.0);
  cam.fy = cam.fx;
  cam.cx = static_cast<double>(width) / 2.0;
  cam.cy = static_cast<double>(height) / 2.0;
  return cam;
}

void CameraRig::validate() const {
  if (views.empty()) throw ConfigError("camera rig must have at least one view");
  for (std::size_t i = 0; i < views.size(); ++i) {
    const Camera& cam = views[i];
    const std::string tag = "camera " + std::to_string(i) + ": ";
    if (!(cam.fx > 0.0) || !(cam.fy > 0.0)) throw ConfigError(tag + "focal lengths must be positive");
    if (cam.width == 0 || cam.height == 0) throw ConfigError(tag + "image size must be positive");
    const Mat3& r = cam.rotation;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        double dot = 0.0;
        for (int k = 0; k < 3; ++k) dot += r[a * 3 + k] * r[b * 3 + k];
        if (std::abs(dot - (a == b ? 1.0 : 0.0)) > 1e-9) throw ConfigError(tag + "rotation is not orthonormal");
      }
    if (std::abs(determinant(r) - 1.0) > 1e-9) throw ConfigError(tag + "rotation determinant is not +1");
  }
}

CameraRig CameraRig::surround(std::size_t num_views, std::size_t height, std::size_t width, double horizontal_fov,
                              double mount_height) {
  if (num_views == 0) throw ConfigError("camera rig must have at least one view");
  CameraRig rig;
  for (std::size_t i = 0; i < num_views; ++i) {
    const double yaw = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(num_views);
    rig.views.push_back(Camera::looking_at_yaw(yaw, {0.0, 0.0, mount_height}, height, width, horizontal_fov));
  }
  return rig;
}

std::array<double, 2> BEVGrid::pillar_center(std::size_t pillar) const {
  if (pillar >= num_pillars()) {
    throw ContractError("pillar index " + std::to_string(pillar) + " out of range for a " + std::to_string(rows) +
                        "x" + std::to_string(cols) + " grid");
  }
  const std::size_t r = pillar / cols, c = pillar % cols;
  return {-extent + (static_cast<double>(c) + 0.5) * cell_x(), -extent + (static_cast<double>(r) + 0.5) * cell_y()};
}

std::array<double, 2> BEVGrid::grid_coord(double x, double y) const {
  return {(x + extent) / cell_x() - 0.5, (y + extent) / cell_y() - 0.5};
}

void BEVGrid::validate() const {
  if (rows == 0 || cols == 0) throw ConfigError("BEV grid must have at least one pillar");
  if (!(extent > 0.0)) throw ConfigError("BEV grid extent must be positive");
  if (z_samples.empty()) throw ConfigError("BEV grid needs at least one reference height");
  for (std::size_t i = 1; i < z_samples.size(); ++i) {
    if (!(z_samples[i] > z_samples[i - 1])) throw ConfigError("BEV z_samples must be strictly increasing");
  }
}

double wrap_angle(double angle) {
  const double two_pi = 2.0 * std::numbers::pi;
  double a = std::fmod(angle, two_pi);
  if (a > std::numbers::pi) a -= two_pi;
  if (a <= -std::numbers::pi) a += two_pi;
  return a;
}

EgoPose EgoPose::make(double x, double y, double yaw) { return {x, y, wrap_angle(yaw)}; }

Vec3 EgoPose::to_world(const Vec3& p) const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  return {c * p[0] - s * p[1] + x, s * p[0] + c * p[1] + y, p[2]};
}

Vec3 EgoPose::to_ego(const Vec3& p) const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double dx = p[0] - x, dy = p[1] - y;
  return {c * dx + s * dy, -s * dx + c * dy, p[2]};
}

std::optional<Projection> project_unbounded(const Vec3& ego_point, const Camera& camera) {
  Vec3 pc = mat_vec(camera.rotation, ego_point);
  for (int k = 0; k < 3; ++k) pc[k] += camera.translation[k];
  if (!(pc[2] > 0.0)) return std::nullopt;
  return Projection{camera.fx * pc[0] / pc[2] + camera.cx, camera.fy * pc[1] / pc[2] + camera.cy, pc[2]};
}

std::optional<Projection> project(const Vec3& ego_point, const Camera& camera) {
  auto p = project_unbounded(ego_point, camera);
  if (!p) return std::nullopt;
  if (p->u < 0.0 || p->u >= static_cast<double>(camera.width) || p->v < 0.0 ||
      p->v >= static_cast<double>(camera.height)) {
    return std::nullopt;
  }
  return p;
}

Vec3 back_project(const Projection& pixel, const Camera& camera) {
  const Vec3 pc{(pixel.u - camera.cx) * pixel.depth / camera.fx, (pixel.v - camera.cy) * pixel.depth / camera.fy,
                pixel.depth};
  const Vec3 shifted{pc[0] - camera.translation[0], pc[1] - camera.translation[1], pc[2] - camera.translation[2]};
  return mat_vec(transpose(camera.rotation), shifted);
}

std::vector<Vec3> pillar_reference_points(const BEVGrid& grid, std::size_t pillar) {
  const auto [x, y] = grid.pillar_center(pillar);
  std::vector<Vec3> pts;
  pts.reserve(grid.z_samples.size());
  for (double z : grid.z_samples) pts.push_back({x, y, z});
  return pts;
}

std::vector<std::size_t> hit_views(const BEVGrid& grid, const CameraRig& rig, std::size_t pillar) {
  const auto pts = pillar_reference_points(grid, pillar);
  std::vector<std::size_t> hits;
  for (std::size_t i = 0; i < rig.views.size(); ++i) {
    for (const Vec3& p : pts) {
      if (project(p, rig.views[i])) {
        hits.push_back(i);
        break;
      }
    }
  }
  return hits;
}

Tensor align_previous_bev(const Tensor& prev, const EgoPose& pose_prev, const EgoPose& pose_cur,
                          const BEVGrid& grid) {
  const std::size_t n = grid.num_pillars();
  if (prev.rank() != 2 || prev.dim(0) != n) {
    throw DimensionError("align_previous_bev: map " + shape_str(prev.shape()) + " does not fit a " +
                         std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + " grid");
  }
  const std::size_t channels = prev.dim(1);
  std::vector<double> coords(2 * n);
  for (std::size_t p = 0; p < n; ++p) {
    const auto [x, y] = grid.pillar_center(p);
    const Vec3 in_prev = pose_prev.to_ego(pose_cur.to_world({x, y, 0.0}));
    auto g = grid.grid_coord(in_prev[0], in_prev[1]);
    // Snap near-integer coordinates so registered cells copy exactly.
    for (double& c : g) {
      const double r = std::round(c);
      if (std::abs(c - r) < 1e-9) c = r;
    }
    coords[2 * p] = g[0];
    coords[2 * p + 1] = g[1];
  }
  const Tensor map = ops::reshape(ops::transpose(prev), {channels, grid.rows, grid.cols});
  return ops::bilinear_sample(map, Tensor(Shape{n, 2}, std::move(coords)));
}

}  // namespace bevkd
