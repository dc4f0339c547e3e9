#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bevkd/detector.hpp"
#include "bevkd/distill.hpp"
#include "bevkd/io.hpp"
#include "bevkd/scene.hpp"

namespace bevkd {

struct OptimConfig {
  double lr = 0.05;
  std::size_t steps = 1000;  // one (t-1, t) window per step
  double clip_norm = 5.0;    // <= 0 disables clipping
  std::uint64_t seed = 0;
};

struct EvalConfig {
  double score_threshold = 0.05;
  std::vector<double> thresholds{0.5, 1.0, 2.0, 4.0};
  double ate_threshold = 2.0;  // TP threshold for the translation error
};

struct TrainConfig {
  std::string dataset;
  std::string eval_dataset;
  DetectorConfig model = DetectorConfig::small();
  DetectorConfig teacher_model = DetectorConfig::large();
  OptimConfig optim;
  OptimConfig teacher_optim;  // used when ablate/sweep must train their own teacher
  LossConfig loss;
  DistillConfig distill;
  EvalConfig eval;
  std::string teacher_ckpt;
  std::size_t workers = 1;

  void validate() const;
};

/// Reads a JSON training config. Relative paths resolve against the file's
/// directory. Missing keys keep their defaults.
TrainConfig load_train_config(const std::filesystem::path& path);
TrainConfig train_config_from_json(const io::Json& doc, const std::filesystem::path& source);
io::Json train_config_to_json(const TrainConfig& config);

struct TrainResult {
  DetectorParams params;
  std::vector<double> curve;  // total loss per step
};

/// Trains `config.model` on detection loss alone.
TrainResult train_teacher(const TrainConfig& config, const Dataset& data);
/// Trains `config.model` under the distillation objective against a frozen teacher.
TrainResult distill_student(const TrainConfig& config, const Dataset& data, const DetectorParams& teacher);

/// One SGD step on non-frozen parameters with global-norm clipping.
/// Returns the pre-clip gradient norm.
double sgd_step(DetectorParams& params, double lr, double clip_norm);

void write_curve(const std::filesystem::path& path, const std::vector<double>& curve);

// --- evaluation -------------------------------------------------------------

struct Prediction {
  int label = 0;
  double score = 0.0;
  double x = 0.0, y = 0.0;
};

struct EvalReport {
  std::size_t num_classes = 0;
  std::size_t num_frames = 0;
  std::vector<double> thresholds;
  std::vector<std::vector<double>> ap;  // [threshold][class]; negative when the class has no ground truth
  std::vector<double> class_ap;         // mean over thresholds; negative when absent
  std::vector<std::size_t> tp, fp, fn;  // per threshold
  double map = 0.0;
  double mate = 0.0;
};

/// Keeps queries whose best real-class probability clears the threshold.
std::vector<Prediction> decode_predictions(const Detections& dets, double score_threshold);

EvalReport evaluate_predictions(const std::vector<std::vector<Prediction>>& predictions,
                                const std::vector<std::vector<SceneObject>>& ground_truth, std::size_t num_classes,
                                const EvalConfig& config);

/// Runs every (t-1, t) window of the dataset.
EvalReport evaluate(const DetectorParams& params, const Dataset& data, const EvalConfig& config);

std::string format_report(const EvalReport& report);

// --- experiments --------------------------------------------------------------

struct AblationRow {
  std::string name;
  bool spatial_temporal = false, response = false, weight_inherit = false;
  bool baseline = false;
  EvalReport report;
  std::uint64_t digest = 0;  // hash of the trained parameters
};

/// Baseline (no teacher) plus the six on/off rows over
/// {spatial-temporal, response, weight-inherit}.
std::vector<AblationRow> ablate(const TrainConfig& config, const Dataset& train, const Dataset& eval,
                                const DetectorParams& teacher);
std::string format_ablation(const std::vector<AblationRow>& rows);

struct SweepRow {
  double lambda = 0.0;
  EvalReport report;
};
std::vector<SweepRow> sweep_lambda(const TrainConfig& config, const Dataset& train, const Dataset& eval,
                                   const DetectorParams& teacher, const std::vector<double>& values);
std::string format_sweep(const std::vector<SweepRow>& rows);

/// FNV-1a over the bytes of every parameter in canonical order.
std::uint64_t params_digest(const DetectorParams& params);

struct VizModel {
  std::string label;
  const DetectorParams* params = nullptr;
};
/// Writes response maps, attention maps and BEV box overlays for one frame.
/// Returns the files written.
std::vector<std::filesystem::path> emit_viz(const std::vector<VizModel>& models, const SceneSequence& seq,
                                            std::size_t frame, const std::filesystem::path& out_dir,
                                            double score_threshold = 0.3);

}  // namespace bevkd
