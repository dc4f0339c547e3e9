#include "bevkd/scene.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <tuple>

#include "bevkd/errors.hpp"
#include "bevkd/io.hpp"

namespace bevkd {
namespace fs = std::filesystem;
using io::Json;

namespace {

constexpr int kSchemaVersion = 1;
constexpr double kNearPlane = 0.05;

struct Pt {
  double x, y;
};

double cross(const Pt& o, const Pt& a, const Pt& b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

// Andrew's monotone chain; counter-clockwise, collinear points dropped.
std::vector<Pt> convex_hull(std::vector<Pt> pts) {
  std::sort(pts.begin(), pts.end(), [](const Pt& a, const Pt& b) { return std::tie(a.x, a.y) < std::tie(b.x, b.y); });
  if (pts.size() < 3) return pts;
  std::vector<Pt> hull(2 * pts.size());
  std::size_t k = 0;
  for (const Pt& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

bool inside_hull(const std::vector<Pt>& hull, const Pt& p) {
  if (hull.size() < 3) return false;
  for (std::size_t i = 0; i < hull.size(); ++i) {
    if (cross(hull[i], hull[(i + 1) % hull.size()], p) < 0) return false;
  }
  return true;
}

double camera_yaw(const Camera& cam) { return std::atan2(cam.rotation[7], cam.rotation[6]); }

Vec3 camera_position(const Camera& cam) {
  const Vec3 neg{-cam.translation[0], -cam.translation[1], -cam.translation[2]};
  return mat_vec(transpose(cam.rotation), neg);
}

double footprint_radius(const SceneObject& o) { return 0.5 * std::hypot(o.size[0], o.size[1]); }

Json object_to_json(const SceneObject& o) {
  return Json{{"class_id", o.class_id},
              {"center", {o.center[0], o.center[1], o.center[2]}},
              {"size", {o.size[0], o.size[1], o.size[2]}},
              {"yaw", o.yaw},
              {"velocity", {o.velocity[0], o.velocity[1]}}};
}

SceneObject object_from_json(const Json& j, const fs::path& src, std::size_t num_classes) {
  SceneObject o;
  const Json& cls = io::field(j, "class_id", src);
  if (!cls.is_number_integer()) throw FormatError("malformed manifest " + src.string() + ": class_id is not an integer");
  o.class_id = cls.get<int>();
  if (o.class_id < 0 || static_cast<std::size_t>(o.class_id) >= num_classes) {
    throw FormatError("malformed manifest " + src.string() + ": class_id out of range");
  }
  const auto c = io::numbers(j, "center", 3, src);
  const auto s = io::numbers(j, "size", 3, src);
  const auto v = io::numbers(j, "velocity", 2, src);
  o.center = {c[0], c[1], c[2]};
  o.size = {s[0], s[1], s[2]};
  o.velocity = {v[0], v[1]};
  o.yaw = io::number(j, "yaw", src);
  return o;
}

Json config_to_json(const SceneConfig& c) {
  return Json{{"num_objects", c.num_objects},       {"num_frames", c.num_frames},
              {"num_views", c.num_views},           {"image_height", c.image_height},
              {"image_width", c.image_width},       {"num_classes", c.num_classes},
              {"world_extent", c.world_extent},     {"ego_speed_min", c.ego_speed_min},
              {"ego_speed_max", c.ego_speed_max},   {"object_speed_max", c.object_speed_max},
              {"frame_dt", c.frame_dt},             {"min_ego_clearance", c.min_ego_clearance},
              {"max_placement_attempts", c.max_placement_attempts}};
}

std::size_t count_field(const Json& j, const std::string& key, const fs::path& src) {
  const Json& v = io::field(j, key, src);
  if (!io::is_count(v)) {
    throw FormatError("malformed manifest " + src.string() + ": field '" + key + "' must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

SceneConfig config_from_json(const Json& j, const fs::path& src) {
  SceneConfig c;
  c.num_objects = count_field(j, "num_objects", src);
  c.num_frames = count_field(j, "num_frames", src);
  c.num_views = count_field(j, "num_views", src);
  c.image_height = count_field(j, "image_height", src);
  c.image_width = count_field(j, "image_width", src);
  c.num_classes = count_field(j, "num_classes", src);
  c.world_extent = io::number(j, "world_extent", src);
  c.ego_speed_min = io::number(j, "ego_speed_min", src);
  c.ego_speed_max = io::number(j, "ego_speed_max", src);
  c.object_speed_max = io::number(j, "object_speed_max", src);
  c.frame_dt = io::number(j, "frame_dt", src);
  c.min_ego_clearance = io::number(j, "min_ego_clearance", src);
  c.max_placement_attempts = count_field(j, "max_placement_attempts", src);
  return c;
}

Json camera_to_json(const Camera& cam) {
  return Json{{"fx", cam.fx},
              {"fy", cam.fy},
              {"cx", cam.cx},
              {"cy", cam.cy},
              {"rotation", std::vector<double>(cam.rotation.begin(), cam.rotation.end())},
              {"translation", std::vector<double>(cam.translation.begin(), cam.translation.end())},
              {"height", cam.height},
              {"width", cam.width}};
}

Camera camera_from_json(const Json& j, const fs::path& src) {
  Camera cam;
  cam.fx = io::number(j, "fx", src);
  cam.fy = io::number(j, "fy", src);
  cam.cx = io::number(j, "cx", src);
  cam.cy = io::number(j, "cy", src);
  const auto r = io::numbers(j, "rotation", 9, src);
  const auto t = io::numbers(j, "translation", 3, src);
  std::copy(r.begin(), r.end(), cam.rotation.begin());
  std::copy(t.begin(), t.end(), cam.translation.begin());
  cam.height = count_field(j, "height", src);
  cam.width = count_field(j, "width", src);
  return cam;
}

fs::path frame_file(const fs::path& dir, std::size_t t, std::size_t view) {
  return dir / "frames" / std::to_string(t) / (std::to_string(view) + ".f64");
}

}  // namespace

std::array<Vec3, 8> SceneObject::corners() const {
  std::array<Vec3, 8> out;
  const double c = std::cos(yaw), s = std::sin(yaw);
  std::size_t i = 0;
  for (double dz : {-0.5, 0.5})
    for (double dx : {-0.5, 0.5})
      for (double dy : {-0.5, 0.5}) {
        const double lx = dx * size[0], ly = dy * size[1];
        out[i++] = {center[0] + c * lx - s * ly, center[1] + s * lx + c * ly, center[2] + dz * size[2]};
      }
  return out;
}

void SceneConfig::validate() const {
  if (num_frames == 0 || num_views == 0 || image_height == 0 || image_width == 0 || num_classes == 0) {
    throw ConfigError("scene config: frames, views, image size and classes must be positive");
  }
  if (image_height < 3 || image_width < 3) throw ConfigError("scene config: images must be at least 3x3");
  if (!(world_extent > 0) || !(frame_dt > 0) || ego_speed_min < 0 || ego_speed_max < ego_speed_min ||
      object_speed_max < 0 || min_ego_clearance < 0 || max_placement_attempts == 0) {
    throw ConfigError("scene config: extents, speeds and time step must be positive and ordered");
  }
}

Vec3 class_size(int class_id) {
  static constexpr std::array<Vec3, 4> kSizes{{{4.2, 1.8, 1.6}, {7.0, 2.5, 3.0}, {0.8, 0.8, 1.8}, {1.8, 0.7, 1.7}}};
  const auto idx = static_cast<std::size_t>(class_id);
  const Vec3& base = kSizes[idx % 4];
  const double scale = 1.0 + 0.25 * static_cast<double>(idx / 4);
  return {base[0] * scale, base[1] * scale, base[2]};
}

std::array<double, 3> class_color(int class_id) {
  static constexpr std::array<std::array<double, 3>, 4> kColors{
      {{0.95, 0.25, 0.2}, {0.2, 0.85, 0.3}, {0.25, 0.35, 0.95}, {0.95, 0.85, 0.15}}};
  const auto idx = static_cast<std::size_t>(class_id);
  auto c = kColors[idx % 4];
  const double fade = 1.0 / (1.0 + 0.5 * static_cast<double>(idx / 4));
  for (double& v : c) v *= fade;
  return c;
}

SceneObject advance(const SceneObject& obj, double dt) {
  SceneObject out = obj;
  out.center[0] += obj.velocity[0] * dt;
  out.center[1] += obj.velocity[1] * dt;
  return out;
}

SceneObject world_to_ego(const SceneObject& obj, const EgoPose& ego) {
  SceneObject out = obj;
  out.center = ego.to_ego(obj.center);
  out.yaw = wrap_angle(obj.yaw - ego.yaw);
  const double c = std::cos(ego.yaw), s = std::sin(ego.yaw);
  out.velocity = {c * obj.velocity[0] + s * obj.velocity[1], -s * obj.velocity[0] + c * obj.velocity[1]};
  return out;
}

Tensor render_background(const Camera& camera) {
  const std::size_t h = camera.height, w = camera.width;
  const double yaw = camera_yaw(camera);
  std::vector<double> img(SceneConfig::kImageChannels * h * w);
  for (std::size_t c = 0; c < SceneConfig::kImageChannels; ++c) {
    const double tint = 0.03 * std::cos(yaw - 2.0 * std::numbers::pi * static_cast<double>(c) / 3.0);
    for (std::size_t v = 0; v < h; ++v)
      for (std::size_t u = 0; u < w; ++u)
        img[(c * h + v) * w + u] = 0.08 + 0.04 * static_cast<double>(v) / static_cast<double>(h) + tint;
  }
  return Tensor(Shape{SceneConfig::kImageChannels, h, w}, std::move(img));
}

Tensor render_view(const std::vector<SceneObject>& objects, const Camera& camera) {
  Tensor image = render_background(camera);
  const std::size_t h = camera.height, w = camera.width;
  auto pixels = image.mutable_data();
  // Depth-sorted painting with a per-pixel key; ties break on geometry so the
  // result never depends on list order.
  std::vector<std::tuple<double, int, double, double, double, std::size_t>> order;
  const Vec3 cam_pos = camera_position(camera);
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const auto& o = objects[i];
    const double dist = std::hypot(o.center[0] - cam_pos[0], o.center[1] - cam_pos[1], o.center[2] - cam_pos[2]);
    order.emplace_back(dist, o.class_id, o.center[0], o.center[1], o.center[2], i);
  }
  std::sort(order.begin(), order.end());
  std::vector<std::uint8_t> owned(h * w, 0);
  for (const auto& entry : order) {
    const SceneObject& o = objects[std::get<5>(entry)];
    std::vector<Pt> pts;
    std::vector<Pt> in_image;
    for (const Vec3& corner : o.corners()) {
      auto p = project_unbounded(corner, camera);
      if (!p || p->depth < kNearPlane) continue;
      pts.push_back({p->u, p->v});
      if (p->u >= 0 && p->u < static_cast<double>(w) && p->v >= 0 && p->v < static_cast<double>(h)) {
        in_image.push_back({p->u, p->v});
      }
    }
    if (pts.empty()) continue;
    const auto hull = convex_hull(pts);
    const auto color = class_color(o.class_id);
    auto paint = [&](std::size_t u, std::size_t v) {
      const std::size_t idx = v * w + u;
      if (owned[idx]) return;  // a nearer object already owns this pixel
      owned[idx] = 1;
      for (std::size_t c = 0; c < SceneConfig::kImageChannels; ++c) pixels[(c * h + v) * w + u] = color[c];
    };
    double umin = std::numeric_limits<double>::infinity(), umax = -umin, vmin = umin, vmax = -umin;
    for (const Pt& p : hull) {
      umin = std::min(umin, p.x);
      umax = std::max(umax, p.x);
      vmin = std::min(vmin, p.y);
      vmax = std::max(vmax, p.y);
    }
    if (hull.size() >= 3 && umax >= 0 && vmax >= 0 && umin < static_cast<double>(w) && vmin < static_cast<double>(h)) {
      const auto u0 = static_cast<std::size_t>(std::max(0.0, std::floor(umin)));
      const auto v0 = static_cast<std::size_t>(std::max(0.0, std::floor(vmin)));
      const auto u1 = static_cast<std::size_t>(std::min(static_cast<double>(w) - 1, std::floor(umax)));
      const auto v1 = static_cast<std::size_t>(std::min(static_cast<double>(h) - 1, std::floor(vmax)));
      for (std::size_t v = v0; v <= v1; ++v)
        for (std::size_t u = u0; u <= u1; ++u) {
          if (inside_hull(hull, {static_cast<double>(u) + 0.5, static_cast<double>(v) + 0.5})) paint(u, v);
        }
    }
    for (const Pt& p : in_image) paint(static_cast<std::size_t>(p.x), static_cast<std::size_t>(p.y));
  }
  return image;
}

SceneSequence generate_sequence(std::uint64_t seed, const SceneConfig& config) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  SceneSequence seq;
  seq.seed = seed;
  seq.config = config;
  seq.rig = CameraRig::surround(config.num_views, config.image_height, config.image_width);

  const double ego_yaw = uniform(-std::numbers::pi, std::numbers::pi);
  const double ego_speed = uniform(config.ego_speed_min, config.ego_speed_max);
  const double evx = ego_speed * std::cos(ego_yaw), evy = ego_speed * std::sin(ego_yaw);
  std::vector<EgoPose> poses;
  for (std::size_t t = 0; t < config.num_frames; ++t) {
    const double time = static_cast<double>(t) * config.frame_dt;
    poses.push_back(EgoPose::make(evx * time, evy * time, ego_yaw));
  }

  const double e = config.world_extent;
  std::vector<SceneObject> placed;
  for (std::size_t k = 0; k < config.num_objects; ++k) {
    bool ok = false;
    for (std::size_t attempt = 0; attempt < config.max_placement_attempts && !ok; ++attempt) {
      SceneObject o;
      o.class_id = static_cast<int>(std::min<std::size_t>(
          static_cast<std::size_t>(unit(rng) * static_cast<double>(config.num_classes)), config.num_classes - 1));
      const Vec3 base = class_size(o.class_id);
      for (int d = 0; d < 3; ++d) o.size[d] = base[d] * uniform(0.9, 1.1);
      o.yaw = uniform(-std::numbers::pi, std::numbers::pi);
      const double speed = uniform(0.0, config.object_speed_max);
      o.velocity = {speed * std::cos(o.yaw), speed * std::sin(o.yaw)};
      o.center = {uniform(-e, e), uniform(-e, e), 0.5 * o.size[2]};

      ok = true;
      for (std::size_t t = 0; t < config.num_frames && ok; ++t) {
        const double time = static_cast<double>(t) * config.frame_dt;
        const SceneObject now = advance(o, time);
        if (std::abs(now.center[0]) > e || std::abs(now.center[1]) > e) ok = false;
        if (std::hypot(now.center[0] - poses[t].x, now.center[1] - poses[t].y) <
            config.min_ego_clearance + footprint_radius(o)) {
          ok = false;
        }
        for (const SceneObject& other : placed) {
          const SceneObject there = advance(other, time);
          if (std::hypot(now.center[0] - there.center[0], now.center[1] - there.center[1]) <=
              footprint_radius(o) + footprint_radius(other)) {
            ok = false;
          }
        }
      }
      if (ok) placed.push_back(o);
    }
    if (!ok) {
      throw ConfigError("could not place object " + std::to_string(k) + " of " + std::to_string(config.num_objects) +
                        " without overlap after " + std::to_string(config.max_placement_attempts) +
                        " attempts; use fewer objects or a larger world_extent");
    }
  }

  for (std::size_t t = 0; t < config.num_frames; ++t) {
    SceneFrame frame;
    frame.t = t;
    frame.ego = poses[t];
    const double time = static_cast<double>(t) * config.frame_dt;
    for (const SceneObject& o : placed) frame.boxes.push_back(world_to_ego(advance(o, time), poses[t]));
    for (const Camera& cam : seq.rig.views) frame.images.push_back(render_view(frame.boxes, cam));
    seq.frames.push_back(std::move(frame));
  }
  return seq;
}

Dataset generate_dataset(std::uint64_t seed, const SceneConfig& config, std::size_t num_sequences) {
  Dataset data;
  data.seed = seed;
  for (std::size_t i = 0; i < num_sequences; ++i) data.sequences.push_back(generate_sequence(derive_seed(seed, i), config));
  return data;
}

void save_sequence(const SceneSequence& seq, const fs::path& dir) {
  fs::create_directories(dir);
  const std::size_t h = seq.config.image_height, w = seq.config.image_width;
  Json frames = Json::array();
  for (const SceneFrame& f : seq.frames) {
    Json boxes = Json::array();
    for (const SceneObject& o : f.boxes) boxes.push_back(object_to_json(o));
    frames.push_back(Json{{"t", f.t}, {"ego", {{"x", f.ego.x}, {"y", f.ego.y}, {"yaw", f.ego.yaw}}}, {"boxes", boxes}});
    for (std::size_t v = 0; v < f.images.size(); ++v) io::write_f64(frame_file(dir, f.t, v), f.images[v].data());
  }
  Json views = Json::array();
  for (const Camera& cam : seq.rig.views) views.push_back(camera_to_json(cam));
  Json manifest{{"schema_version", kSchemaVersion},
                {"seed", seq.seed},
                {"config", config_to_json(seq.config)},
                {"rig", {{"views", views}}},
                {"image_shape", {SceneConfig::kImageChannels, h, w}},
                {"num_frames", seq.frames.size()},
                {"frames", frames}};
  io::write_json(dir / "manifest.json", manifest);
}

SceneSequence load_sequence(const fs::path& dir) {
  const fs::path src = dir / "manifest.json";
  const Json m = io::read_json(src);
  if (count_field(m, "schema_version", src) != static_cast<std::size_t>(kSchemaVersion)) {
    throw FormatError("malformed manifest " + src.string() + ": unsupported schema_version");
  }
  SceneSequence seq;
  const Json& seed = io::field(m, "seed", src);
  if (!seed.is_number_unsigned() && !seed.is_number_integer()) throw FormatError("malformed manifest " + src.string() + ": seed");
  seq.seed = seed.get<std::uint64_t>();
  seq.config = config_from_json(io::field(m, "config", src), src);
  const Json& views = io::field(io::field(m, "rig", src), "views", src);
  if (!views.is_array()) throw FormatError("malformed manifest " + src.string() + ": rig.views is not an array");
  for (const Json& v : views) seq.rig.views.push_back(camera_from_json(v, src));
  try {
    seq.rig.validate();
  } catch (const ConfigError& e) {
    throw FormatError("malformed manifest " + src.string() + ": " + e.what());
  }

  const auto shape = io::numbers(m, "image_shape", 3, src);
  const std::size_t c = static_cast<std::size_t>(shape[0]), h = static_cast<std::size_t>(shape[1]),
                    w = static_cast<std::size_t>(shape[2]);
  if (c != SceneConfig::kImageChannels || h != seq.config.image_height || w != seq.config.image_width ||
      seq.rig.size() != seq.config.num_views) {
    throw FormatError("shape mismatch in " + src.string() + ": image_shape/rig disagree with the config echo");
  }
  for (const Camera& cam : seq.rig.views) {
    if (cam.height != h || cam.width != w) {
      throw FormatError("shape mismatch in " + src.string() + ": camera image size differs from image_shape");
    }
  }
  const Json& frames = io::field(m, "frames", src);
  const std::size_t num_frames = count_field(m, "num_frames", src);
  if (!frames.is_array() || frames.size() != num_frames) {
    throw FormatError("shape mismatch in " + src.string() + ": num_frames does not match the frame list");
  }
  for (const Json& jf : frames) {
    SceneFrame f;
    f.t = count_field(jf, "t", src);
    const Json& ego = io::field(jf, "ego", src);
    f.ego = {io::number(ego, "x", src), io::number(ego, "y", src), io::number(ego, "yaw", src)};
    const Json& boxes = io::field(jf, "boxes", src);
    if (!boxes.is_array()) throw FormatError("malformed manifest " + src.string() + ": boxes is not an array");
    for (const Json& b : boxes) f.boxes.push_back(object_from_json(b, src, seq.config.num_classes));
    for (std::size_t v = 0; v < seq.rig.size(); ++v) {
      f.images.emplace_back(Shape{c, h, w}, io::read_f64(frame_file(dir, f.t, v), c * h * w));
    }
    seq.frames.push_back(std::move(f));
  }
  return seq;
}

void save_dataset(const Dataset& data, const fs::path& dir) {
  Json names = Json::array();
  for (std::size_t i = 0; i < data.sequences.size(); ++i) {
    std::ostringstream name;
    name << "seq_" << std::setw(4) << std::setfill('0') << i;
    save_sequence(data.sequences[i], dir / name.str());
    names.push_back(name.str());
  }
  io::write_json(dir / "dataset.json", Json{{"schema_version", kSchemaVersion}, {"seed", data.seed}, {"sequences", names}});
}

Dataset load_dataset(const fs::path& dir) {
  Dataset data;
  const fs::path index = dir / "dataset.json";
  if (!fs::exists(index)) {
    if (!fs::exists(dir / "manifest.json")) {
      throw FormatError("no dataset.json or manifest.json in " + dir.string());
    }
    data.sequences.push_back(load_sequence(dir));
    data.seed = data.sequences.back().seed;
    return data;
  }
  const Json j = io::read_json(index);
  const Json& seed = io::field(j, "seed", index);
  if (!seed.is_number_unsigned() && !seed.is_number_integer()) throw FormatError("malformed manifest " + index.string() + ": seed");
  data.seed = seed.get<std::uint64_t>();
  const Json& names = io::field(j, "sequences", index);
  if (!names.is_array()) throw FormatError("malformed manifest " + index.string() + ": sequences is not an array");
  for (const Json& n : names) {
    if (!n.is_string()) throw FormatError("malformed manifest " + index.string() + ": sequence name is not a string");
    data.sequences.push_back(load_sequence(dir / n.get<std::string>()));
  }
  return data;
}

}  // namespace bevkd
