#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "bevkd/errors.hpp"
#include "bevkd/io.hpp"
#include "bevkd/scene.hpp"
#include "test_util.hpp"

namespace bevkd {
namespace {

namespace fs = std::filesystem;
using testing::snapshot;
using testing::TempDir;

SceneConfig small_config() {
  SceneConfig c;
  c.num_objects = 3;
  c.num_frames = 3;
  c.num_views = 2;
  c.image_height = 16;
  c.image_width = 24;
  return c;
}

bool differs_from_background(const Tensor& image, const Camera& cam) {
  const Tensor bg = render_background(cam);
  for (std::size_t i = 0; i < image.numel(); ++i)
    if (image.at(i) != bg.at(i)) return true;
  return false;
}

TEST(GenerateSequence, SameSeedGivesByteIdenticalFiles) {
  TempDir a, b;
  save_sequence(generate_sequence(42, small_config()), a.path());
  save_sequence(generate_sequence(42, small_config()), b.path());
  EXPECT_EQ(snapshot(a.path()), snapshot(b.path()));
  TempDir c;
  save_sequence(generate_sequence(43, small_config()), c.path());
  EXPECT_NE(snapshot(a.path()), snapshot(c.path()));
}

TEST(GenerateSequence, NoObjectsRendersBackgroundOnly) {
  auto cfg = small_config();
  cfg.num_objects = 0;
  const auto seq = generate_sequence(5, cfg);
  for (const auto& f : seq.frames) {
    EXPECT_TRUE(f.boxes.empty());
    for (std::size_t v = 0; v < f.images.size(); ++v) {
      EXPECT_FALSE(differs_from_background(f.images[v], seq.rig.views[v]));
      const Tensor& first = seq.frames[0].images[v];
      EXPECT_TRUE(std::equal(first.data().begin(), first.data().end(), f.images[v].data().begin()));
    }
  }
}

TEST(GenerateSequence, ConstantVelocityKinematics) {
  SceneObject o;
  o.velocity = {1.0, 0.0};
  o.center = {2.0, -1.0, 0.8};
  const auto next = advance(o, 0.5);
  EXPECT_DOUBLE_EQ(next.center[0] - o.center[0], 0.5);
  EXPECT_EQ(next.center[1], o.center[1]);

  auto cfg = small_config();
  cfg.num_frames = 6;
  const auto seq = generate_sequence(11, cfg);
  // World trajectories are exactly linear in t.
  for (std::size_t k = 0; k < cfg.num_objects; ++k) {
    std::vector<Vec3> world;
    for (const auto& f : seq.frames) world.push_back(f.ego.to_world(f.boxes[k].center));
    const auto& b0 = seq.frames[0].boxes[k];
    const double c = std::cos(seq.frames[0].ego.yaw), s = std::sin(seq.frames[0].ego.yaw);
    const double vx = c * b0.velocity[0] - s * b0.velocity[1], vy = s * b0.velocity[0] + c * b0.velocity[1];
    for (std::size_t t = 1; t < world.size(); ++t) {
      EXPECT_NEAR(world[t][0] - world[t - 1][0], vx * cfg.frame_dt, 1e-12);
      EXPECT_NEAR(world[t][1] - world[t - 1][1], vy * cfg.frame_dt, 1e-12);
      EXPECT_LE(std::abs(world[t][0]), cfg.world_extent);
      EXPECT_LE(std::abs(world[t][1]), cfg.world_extent);
    }
  }
}

TEST(GenerateSequence, PlacementFailureIsAConfigError) {
  auto cfg = small_config();
  cfg.num_objects = 40;
  cfg.world_extent = 5.0;
  cfg.max_placement_attempts = 50;
  try {
    generate_sequence(1, cfg);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("fewer objects"), std::string::npos);
  }
  cfg.num_frames = 0;
  EXPECT_THROW(generate_sequence(1, cfg), ConfigError);
}

TEST(GenerateSequence, ObjectsDoNotOverlap) {
  const auto seq = generate_sequence(17, SceneConfig{});
  for (const auto& f : seq.frames)
    for (std::size_t i = 0; i < f.boxes.size(); ++i)
      for (std::size_t j = i + 1; j < f.boxes.size(); ++j) {
        const auto& a = f.boxes[i];
        const auto& b = f.boxes[j];
        const double gap = std::hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]);
        EXPECT_GT(gap, 0.5 * std::hypot(a.size[0], a.size[1]) + 0.5 * std::hypot(b.size[0], b.size[1]));
      }
}

TEST(RenderView, ObjectDeadAheadIsCentredOnPrincipalPoint) {
  const auto rig = CameraRig::surround(1, 32, 56);
  const Camera& cam = rig.views[0];
  SceneObject o;
  o.center = {10.0, 0.0, 1.5};  // on the optical axis
  o.size = {2.0, 2.0, 2.0};
  const Tensor img = render_view({o}, cam);
  const Tensor bg = render_background(cam);
  double su = 0, sv = 0;
  std::size_t n = 0;
  for (std::size_t v = 0; v < 32; ++v)
    for (std::size_t u = 0; u < 56; ++u)
      if (img.at(v * 56 + u) != bg.at(v * 56 + u)) {
        su += static_cast<double>(u) + 0.5;
        sv += static_cast<double>(v) + 0.5;
        ++n;
      }
  ASSERT_GT(n, 0u);
  EXPECT_NEAR(su / static_cast<double>(n), cam.cx, 0.5);
  EXPECT_NEAR(sv / static_cast<double>(n), cam.cy, 0.5);
}

TEST(RenderView, NearerObjectWinsAndOrderIsIrrelevant) {
  const auto rig = CameraRig::surround(1, 32, 56);
  const Camera& cam = rig.views[0];
  SceneObject near_obj, far_obj;
  near_obj.class_id = 0;
  near_obj.center = {8.0, 0.5, 0.8};
  near_obj.size = {2.0, 2.0, 1.6};
  far_obj.class_id = 2;
  far_obj.center = {14.0, 0.0, 1.2};
  far_obj.size = {3.0, 3.0, 2.4};
  const Tensor ab = render_view({near_obj, far_obj}, cam);
  const Tensor ba = render_view({far_obj, near_obj}, cam);
  EXPECT_TRUE(std::equal(ab.data().begin(), ab.data().end(), ba.data().begin()));

  const Tensor only_near = render_view({near_obj}, cam);
  const Tensor only_far = render_view({far_obj}, cam);
  const auto near_color = class_color(0);
  std::size_t overlap = 0;
  for (std::size_t i = 0; i < 32 * 56; ++i) {
    const bool in_near = only_near.at(i) != render_background(cam).at(i);
    const bool in_far = only_far.at(i) != render_background(cam).at(i);
    if (in_near && in_far) {
      ++overlap;
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(ab.at(c * 32 * 56 + i), near_color[c]);
    }
  }
  EXPECT_GT(overlap, 0u);
}

TEST(RenderView, EveryVisibleBoxPaintsPixels) {
  auto cfg = SceneConfig{};
  cfg.num_frames = 2;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto seq = generate_sequence(seed, cfg);
    for (const auto& f : seq.frames)
      for (const auto& box : f.boxes)
        for (const auto& cam : seq.rig.views) {
          bool any_hit = false;
          for (const auto& corner : box.corners()) any_hit = any_hit || project(corner, cam).has_value();
          if (any_hit) EXPECT_TRUE(differs_from_background(render_view({box}, cam), cam));
        }
  }
}

TEST(SequenceIO, RoundTripIsByteIdentical) {
  TempDir a, b;
  const auto seq = generate_sequence(77, small_config());
  save_sequence(seq, a.path());
  const auto loaded = load_sequence(a.path());
  save_sequence(loaded, b.path());
  EXPECT_EQ(snapshot(a.path()), snapshot(b.path()));
  ASSERT_EQ(loaded.frames.size(), seq.frames.size());
  EXPECT_EQ(loaded.seed, 77u);
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    EXPECT_EQ(loaded.frames[t].boxes.size(), seq.frames[t].boxes.size());
    for (std::size_t v = 0; v < seq.rig.size(); ++v) {
      const auto& x = seq.frames[t].images[v];
      const auto& y = loaded.frames[t].images[v];
      EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
    }
  }
}

TEST(SequenceIO, DatasetRoundTrip) {
  TempDir a, b;
  const auto data = generate_dataset(9, small_config(), 3);
  save_dataset(data, a.path());
  save_dataset(load_dataset(a.path()), b.path());
  EXPECT_EQ(snapshot(a.path()), snapshot(b.path()));
  EXPECT_EQ(load_dataset(a.path() / "seq_0001").sequences.size(), 1u);
}

std::string load_error(const fs::path& dir) {
  try {
    load_sequence(dir);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

TEST(SequenceIO, DistinctDiagnostics) {
  TempDir dir;
  const auto seq = generate_sequence(3, small_config());

  save_sequence(seq, dir.path());
  {
    std::ofstream(dir.path() / "manifest.json") << "{ not json";
  }
  EXPECT_NE(load_error(dir.path()).find("malformed manifest"), std::string::npos);

  save_sequence(seq, dir.path());
  {
    const auto file = dir.path() / "frames" / "1" / "0.f64";
    const auto bytes = io::read_bytes(file);
    std::ofstream(file, std::ios::binary | std::ios::trunc).write(bytes.data(), 100);
  }
  EXPECT_NE(load_error(dir.path()).find("truncated array"), std::string::npos);

  save_sequence(seq, dir.path());
  {
    auto m = io::read_json(dir.path() / "manifest.json");
    m["image_shape"] = {3, 16, 25};
    io::write_json(dir.path() / "manifest.json", m);
  }
  EXPECT_NE(load_error(dir.path()).find("shape mismatch"), std::string::npos);

  save_sequence(seq, dir.path());
  {
    auto m = io::read_json(dir.path() / "manifest.json");
    m["frames"][0]["boxes"][0].erase("yaw");
    io::write_json(dir.path() / "manifest.json", m);
  }
  const auto missing = load_error(dir.path());
  EXPECT_NE(missing.find("'yaw'"), std::string::npos) << missing;
}

}  // namespace
}  // namespace bevkd
