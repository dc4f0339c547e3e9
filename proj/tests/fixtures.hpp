#pragma once

#include "bevkd/detector.hpp"
#include "bevkd/scene.hpp"
#include "bevkd/trainer.hpp"

namespace bevkd::testing {

// Small enough that a training step takes about a millisecond.
inline DetectorConfig tiny_model(std::size_t depth = 1, std::size_t hidden = 3) {
  DetectorConfig c;
  c.grid.rows = 4;
  c.grid.cols = 4;
  c.grid.extent = 6.0;
  c.grid.z_samples = {0.5, 1.5};
  c.image_height = 12;
  c.image_width = 16;
  c.backbone_hidden = hidden;
  c.feat_channels = 4;
  c.embed_dim = 6;
  c.decoder_depth = depth;
  c.num_points = 2;
  c.num_queries = 4;
  c.num_classes = 2;
  c.head_hidden = 8;
  return c;
}

inline SceneConfig tiny_scene() {
  SceneConfig s;
  s.num_objects = 2;
  s.num_frames = 3;
  s.num_views = 2;
  s.image_height = 12;
  s.image_width = 16;
  s.num_classes = 2;
  s.world_extent = 6.0;
  return s;
}

inline TrainConfig tiny_train_config(std::size_t steps = 20) {
  TrainConfig c;
  c.model = tiny_model(1, 3);
  c.teacher_model = tiny_model(2, 5);
  c.optim.steps = steps;
  c.optim.seed = 3;
  c.teacher_optim = c.optim;
  return c;
}

}  // namespace bevkd::testing
