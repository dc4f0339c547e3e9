#include "bevkd/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "bevkd/errors.hpp"
#include "bevkd/ops.hpp"

namespace bevkd {

namespace fs = std::filesystem;
using io::Json;

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fmt_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Window {
  std::size_t seq, t;
};

std::vector<Window> windows_of(const Dataset& data) {
  std::vector<Window> out;
  for (std::size_t s = 0; s < data.sequences.size(); ++s)
    for (std::size_t t = 1; t < data.sequences[s].frames.size(); ++t) out.push_back({s, t});
  return out;
}

void check_dataset(const Dataset& data, const DetectorConfig& model) {
  if (data.sequences.empty()) throw ConfigError("dataset has no sequences");
  for (const auto& seq : data.sequences) {
    if (seq.frames.size() < 2) throw ConfigError("every sequence needs at least two frames");
    if (seq.config.image_height != model.image_height || seq.config.image_width != model.image_width)
      throw ConfigError("dataset images are " + std::to_string(seq.config.image_height) + "x" +
                        std::to_string(seq.config.image_width) + " but the model expects " +
                        std::to_string(model.image_height) + "x" + std::to_string(model.image_width));
    if (seq.config.num_classes > model.num_classes)
      throw ConfigError("dataset has " + std::to_string(seq.config.num_classes) + " classes, model only " +
                        std::to_string(model.num_classes));
  }
}

TrainResult train_impl(const TrainConfig& config, const Dataset& data, const DetectorParams* teacher) {
  config.validate();
  DetectorConfig model = config.model;
  model.init_seed = derive_seed(config.optim.seed, kInitStream);
  check_dataset(data, model);
  TrainResult result{init_params(model), {}};
  DetectorParams& params = result.params;

  const DistillConfig& kd = config.distill;
  std::vector<std::size_t> layer_map;
  const bool use_st = teacher && kd.enable_spatial_temporal;
  const bool use_resp = teacher && kd.enable_response;
  if (teacher) {
    if (teacher->config.grid.rows != model.grid.rows || teacher->config.grid.cols != model.grid.cols ||
        teacher->config.grid.z_samples != model.grid.z_samples || teacher->config.num_points != model.num_points)
      throw ConfigError("teacher and student must share the BEV grid, reference heights and sampling points");
    apply_weight_inheriting(params, *teacher, kd.effective_inherit_mode(), kd.inherit_object_queries);
    layer_map = kd.layer_map.empty() ? default_layer_map(model.decoder_depth, teacher->config.decoder_depth)
                                     : kd.layer_map;
  }

  const auto windows = windows_of(data);
  std::vector<std::size_t> order(windows.size());
  std::mt19937_64 rng(derive_seed(config.optim.seed, kShuffleStream));
  result.curve.reserve(config.optim.steps);
  std::size_t cursor = order.size();
  for (std::size_t step = 0; step < config.optim.steps; ++step) {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const Window w = windows[order[cursor++]];
    const auto& seq = data.sequences[w.seq];
    const SceneFrame& prev = seq.frames[w.t - 1];
    const SceneFrame& cur = seq.frames[w.t];

    const ForwardResult out = forward_window(params, seq.rig, prev, cur);
    const Tensor l_orig = detection_loss(out.dets, boxes_in_grid(cur.boxes, model.grid), config.loss);
    Tensor l_st, l_resp;
    if (use_st || use_resp) {
      ForwardResult t_out;
      {
        NoGradGuard guard;
        t_out = forward_window(*teacher, seq.rig, prev, cur);
      }
      if (use_st) l_st = spatial_temporal_loss(out.record, t_out.record, layer_map);
      if (use_resp) l_resp = response_loss(out.e_bev, t_out.e_bev);
    }
    const Tensor loss = teacher ? total_loss(l_orig, l_st, l_resp, kd) : l_orig;
    params.zero_grad();
    loss.backward();
    sgd_step(params, config.optim.lr, config.optim.clip_norm);
    result.curve.push_back(loss.item());
  }
  for (auto& [_, t] : params.tensors) t.clear_grad();
  return result;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  model.validate();
  if (optim.steps == 0) throw ConfigError("optim.steps must be positive");
  if (!(optim.lr > 0.0)) throw ConfigError("optim.lr must be positive");
  distill.validate();
  if (eval.thresholds.empty()) throw ConfigError("eval.thresholds must not be empty");
}

namespace {

void read_optim(const Json& doc, OptimConfig& o, const fs::path& src) {
  if (!doc.is_object()) throw FormatError("malformed config " + src.string() + ": optim section is not an object");
  if (doc.contains("lr")) o.lr = io::number(doc, "lr", src);
  if (doc.contains("clip_norm")) o.clip_norm = io::number(doc, "clip_norm", src);
  if (doc.contains("steps")) {
    const Json& v = doc["steps"];
    if (!io::is_count(v) || v.get<std::uint64_t>() == 0)
      throw FormatError("malformed config " + src.string() + ": field 'steps' must be a positive integer");
    o.steps = v.get<std::size_t>();
  }
  if (doc.contains("seed")) {
    const Json& v = doc["seed"];
    if (!io::is_count(v))
      throw FormatError("malformed config " + src.string() + ": field 'seed' must be a non-negative integer");
    o.seed = v.get<std::uint64_t>();
  }
}

bool read_bool(const Json& doc, const char* key, bool fallback, const fs::path& src) {
  if (!doc.contains(key)) return fallback;
  if (!doc[key].is_boolean())
    throw FormatError("malformed config " + src.string() + ": field '" + key + "' must be a boolean");
  return doc[key].get<bool>();
}

std::string resolve(const Json& doc, const char* key, const fs::path& src) {
  if (!doc.contains(key)) return "";
  if (!doc[key].is_string()) throw FormatError("malformed config " + src.string() + ": field '" + key + "'");
  fs::path p = doc[key].get<std::string>();
  if (p.is_relative() && !src.empty()) p = src.parent_path() / p;
  return p.string();
}

Json optim_json(const OptimConfig& o) {
  return Json{{"lr", o.lr}, {"steps", o.steps}, {"clip_norm", o.clip_norm}, {"seed", o.seed}};
}

}  // namespace

TrainConfig train_config_from_json(const Json& doc, const fs::path& src) {
  if (!doc.is_object()) throw FormatError("malformed config " + src.string() + ": top level is not an object");
  TrainConfig c;
  c.dataset = resolve(doc, "dataset", src);
  c.eval_dataset = resolve(doc, "eval_dataset", src);
  c.teacher_ckpt = resolve(doc, "teacher_ckpt", src);
  if (doc.contains("model")) c.model = config_from_json(doc["model"], src, c.model);
  if (doc.contains("teacher_model")) c.teacher_model = config_from_json(doc["teacher_model"], src, c.teacher_model);
  if (doc.contains("optim")) read_optim(doc["optim"], c.optim, src);
  c.teacher_optim = c.optim;
  if (doc.contains("teacher_optim")) read_optim(doc["teacher_optim"], c.teacher_optim, src);
  if (doc.contains("loss")) {
    const Json& l = doc["loss"];
    if (l.contains("class_weight")) c.loss.class_weight = io::number(l, "class_weight", src);
    if (l.contains("box_weight")) c.loss.box_weight = io::number(l, "box_weight", src);
    if (l.contains("no_object_weight")) c.loss.no_object_weight = io::number(l, "no_object_weight", src);
  }
  if (doc.contains("distill")) {
    const Json& d = doc["distill"];
    if (d.contains("lambda")) c.distill.lambda = io::number(d, "lambda", src);
    c.distill.enable_spatial_temporal = read_bool(d, "spatial_temporal", c.distill.enable_spatial_temporal, src);
    c.distill.enable_response = read_bool(d, "response", c.distill.enable_response, src);
    c.distill.enable_weight_inherit = read_bool(d, "weight_inherit", c.distill.enable_weight_inherit, src);
    c.distill.inherit_object_queries = read_bool(d, "inherit_object_queries", c.distill.inherit_object_queries, src);
    if (d.contains("inherit_mode")) {
      if (!d["inherit_mode"].is_string())
        throw FormatError("malformed config " + src.string() + ": field 'inherit_mode'");
      c.distill.inherit_mode = parse_inherit_mode(d["inherit_mode"].get<std::string>());
    }
    if (d.contains("layer_map")) {
      const Json& m = d["layer_map"];
      if (!m.is_array()) throw FormatError("malformed config " + src.string() + ": field 'layer_map'");
      for (const Json& v : m) {
        if (!io::is_count(v))
          throw FormatError("malformed config " + src.string() + ": layer_map entries must be non-negative integers");
        c.distill.layer_map.push_back(v.get<std::size_t>());
      }
    }
  }
  if (doc.contains("eval")) {
    const Json& e = doc["eval"];
    if (e.contains("score_threshold")) c.eval.score_threshold = io::number(e, "score_threshold", src);
    if (e.contains("thresholds")) c.eval.thresholds = io::numbers(e, "thresholds", e["thresholds"].size(), src);
    if (e.contains("ate_threshold")) c.eval.ate_threshold = io::number(e, "ate_threshold", src);
  }
  if (doc.contains("workers")) {
    const Json& v = doc["workers"];
    if (!io::is_count(v) || v.get<std::uint64_t>() == 0)
      throw FormatError("malformed config " + src.string() + ": field 'workers' must be a positive integer");
    c.workers = v.get<std::size_t>();
  }
  return c;
}

TrainConfig load_train_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  return train_config_from_json(io::read_json(path), path);
}

Json train_config_to_json(const TrainConfig& c) {
  Json layer_map = Json::array();
  for (auto v : c.distill.layer_map) layer_map.push_back(v);
  return Json{{"dataset", c.dataset},
              {"eval_dataset", c.eval_dataset},
              {"teacher_ckpt", c.teacher_ckpt},
              {"model", config_to_json(c.model)},
              {"teacher_model", config_to_json(c.teacher_model)},
              {"optim", optim_json(c.optim)},
              {"teacher_optim", optim_json(c.teacher_optim)},
              {"loss",
               {{"class_weight", c.loss.class_weight},
                {"box_weight", c.loss.box_weight},
                {"no_object_weight", c.loss.no_object_weight}}},
              {"distill",
               {{"lambda", c.distill.lambda},
                {"spatial_temporal", c.distill.enable_spatial_temporal},
                {"response", c.distill.enable_response},
                {"weight_inherit", c.distill.enable_weight_inherit},
                {"inherit_mode", to_string(c.distill.inherit_mode)},
                {"inherit_object_queries", c.distill.inherit_object_queries},
                {"layer_map", layer_map}}},
              {"eval",
               {{"score_threshold", c.eval.score_threshold},
                {"thresholds", c.eval.thresholds},
                {"ate_threshold", c.eval.ate_threshold}}},
              {"workers", c.workers}};
}

// ---------------------------------------------------------------------------
// Training

double sgd_step(DetectorParams& params, double lr, double clip_norm) {
  double sq = 0.0;
  for (const auto& name : params.names) {
    if (params.is_frozen(name)) continue;
    const Tensor& t = params.at(name);
    if (!t.has_grad()) continue;
    for (double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double factor = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;
  for (const auto& name : params.names) {
    if (params.is_frozen(name)) continue;
    Tensor& t = params.at(name);
    if (!t.has_grad()) continue;
    const auto g = t.grad();
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * factor * g[i];
  }
  return norm;
}

TrainResult train_teacher(const TrainConfig& config, const Dataset& data) { return train_impl(config, data, nullptr); }

TrainResult distill_student(const TrainConfig& config, const Dataset& data, const DetectorParams& teacher) {
  return train_impl(config, data, &teacher);
}

void write_curve(const fs::path& path, const std::vector<double>& curve) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "step\tvalue\n";
  for (std::size_t i = 0; i < curve.size(); ++i) out << i << '\t' << fmt_full(curve[i]) << '\n';
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<Prediction> decode_predictions(const Detections& dets, double score_threshold) {
  const std::size_t nq = dets.probs.dim(0), k = dets.probs.dim(1);
  const auto probs = dets.probs.data();
  const auto boxes = dets.boxes.data();
  std::vector<Prediction> out;
  for (std::size_t q = 0; q < nq; ++q) {
    std::size_t best = 0;
    for (std::size_t c = 1; c + 1 < k; ++c)
      if (probs[q * k + c] > probs[q * k + best]) best = c;
    const double score = probs[q * k + best];
    if (score < score_threshold) continue;
    out.push_back({static_cast<int>(best), score, boxes[q * 7], boxes[q * 7 + 1]});
  }
  return out;
}

namespace {

double eleven_point_ap(const std::vector<double>& precision, const std::vector<double>& recall) {
  double total = 0.0;
  for (int i = 0; i <= 10; ++i) {
    const double r = i / 10.0;
    double best = 0.0;
    for (std::size_t j = 0; j < recall.size(); ++j)
      if (recall[j] >= r - 1e-12) best = std::max(best, precision[j]);
    total += best;
  }
  return total / 11.0;
}

}  // namespace

EvalReport evaluate_predictions(const std::vector<std::vector<Prediction>>& predictions,
                                const std::vector<std::vector<SceneObject>>& ground_truth, std::size_t num_classes,
                                const EvalConfig& config) {
  if (predictions.size() != ground_truth.size())
    throw DimensionError("evaluate: prediction and ground-truth frame counts differ");
  EvalReport rep;
  rep.num_classes = num_classes;
  rep.num_frames = predictions.size();
  rep.thresholds = config.thresholds;
  rep.ap.assign(config.thresholds.size(), std::vector<double>(num_classes, -1.0));
  rep.tp.assign(config.thresholds.size(), 0);
  rep.fp.assign(config.thresholds.size(), 0);
  rep.fn.assign(config.thresholds.size(), 0);

  struct Ref {
    std::size_t frame, index;
  };
  std::vector<std::size_t> gt_count(num_classes, 0);
  std::vector<std::vector<Ref>> by_class(num_classes);
  for (std::size_t f = 0; f < ground_truth.size(); ++f)
    for (const auto& g : ground_truth[f]) {
      if (g.class_id < 0 || static_cast<std::size_t>(g.class_id) >= num_classes)
        throw ContractError("evaluate: ground-truth class out of range");
      ++gt_count[static_cast<std::size_t>(g.class_id)];
    }
  for (std::size_t f = 0; f < predictions.size(); ++f)
    for (std::size_t i = 0; i < predictions[f].size(); ++i) {
      const int label = predictions[f][i].label;
      if (label < 0 || static_cast<std::size_t>(label) >= num_classes)
        throw ContractError("evaluate: predicted class out of range");
      by_class[static_cast<std::size_t>(label)].push_back({f, i});
    }
  for (auto& refs : by_class)
    std::stable_sort(refs.begin(), refs.end(), [&](const Ref& a, const Ref& b) {
      return predictions[a.frame][a.index].score > predictions[b.frame][b.index].score;
    });

  double ate_sum = 0.0;
  std::size_t ate_n = 0;
  for (std::size_t ti = 0; ti < config.thresholds.size(); ++ti) {
    const double thr = config.thresholds[ti];
    const bool ate_here = std::abs(thr - config.ate_threshold) < 1e-12;
    for (std::size_t c = 0; c < num_classes; ++c) {
      std::vector<std::vector<char>> used(ground_truth.size());
      for (std::size_t f = 0; f < ground_truth.size(); ++f) used[f].assign(ground_truth[f].size(), 0);
      std::vector<double> precision, recall;
      std::size_t tp = 0, fp = 0;
      for (const Ref& r : by_class[c]) {
        const Prediction& p = predictions[r.frame][r.index];
        const auto& gts = ground_truth[r.frame];
        double best = thr;
        std::size_t best_i = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
          if (used[r.frame][g] || gts[g].class_id != static_cast<int>(c)) continue;
          const double d = std::hypot(p.x - gts[g].center[0], p.y - gts[g].center[1]);
          if (d < best) {
            best = d;
            best_i = g;
          }
        }
        if (best_i < gts.size()) {
          used[r.frame][best_i] = 1;
          ++tp;
          if (ate_here) {
            ate_sum += best;
            ++ate_n;
          }
        } else {
          ++fp;
        }
        if (gt_count[c] > 0) {
          precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
          recall.push_back(static_cast<double>(tp) / static_cast<double>(gt_count[c]));
        }
      }
      rep.tp[ti] += tp;
      rep.fp[ti] += fp;
      rep.fn[ti] += gt_count[c] - tp;
      if (gt_count[c] > 0) rep.ap[ti][c] = eleven_point_ap(precision, recall);
    }
  }

  rep.class_ap.assign(num_classes, -1.0);
  double map_sum = 0.0;
  for (std::size_t ti = 0; ti < config.thresholds.size(); ++ti) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < num_classes; ++c)
      if (rep.ap[ti][c] >= 0.0) {
        s += rep.ap[ti][c];
        ++n;
      }
    map_sum += n ? s / static_cast<double>(n) : 0.0;
  }
  rep.map = map_sum / static_cast<double>(config.thresholds.size());
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (gt_count[c] == 0) continue;
    double s = 0.0;
    for (std::size_t ti = 0; ti < config.thresholds.size(); ++ti) s += rep.ap[ti][c];
    rep.class_ap[c] = s / static_cast<double>(config.thresholds.size());
  }
  // Without any true positive the error is reported at the matching radius.
  rep.mate = ate_n ? ate_sum / static_cast<double>(ate_n) : config.ate_threshold;
  return rep;
}

EvalReport evaluate(const DetectorParams& params, const Dataset& data, const EvalConfig& config) {
  check_dataset(data, params.config);
  NoGradGuard guard;
  std::vector<std::vector<Prediction>> preds;
  std::vector<std::vector<SceneObject>> gts;
  for (const Window& w : windows_of(data)) {
    const auto& seq = data.sequences[w.seq];
    const ForwardResult out = forward_window(params, seq.rig, seq.frames[w.t - 1], seq.frames[w.t]);
    preds.push_back(decode_predictions(out.dets, config.score_threshold));
    gts.push_back(boxes_in_grid(seq.frames[w.t].boxes, params.config.grid));
  }
  return evaluate_predictions(preds, gts, params.config.num_classes, config);
}

std::string format_report(const EvalReport& r) {
  std::ostringstream out;
  out << "metric\tvalue\n";
  out << "mAP\t" << fmt(r.map) << '\n';
  out << "mATE\t" << fmt(r.mate) << '\n';
  out << "frames\t" << r.num_frames << '\n';
  for (std::size_t c = 0; c < r.num_classes; ++c)
    out << "AP_class_" << c << '\t' << (r.class_ap[c] < 0 ? std::string("nan") : fmt(r.class_ap[c])) << '\n';
  for (std::size_t ti = 0; ti < r.thresholds.size(); ++ti) {
    const std::string t = fmt(r.thresholds[ti]).substr(0, 4);
    for (std::size_t c = 0; c < r.num_classes; ++c)
      out << "AP@" << t << "_class_" << c << '\t' << (r.ap[ti][c] < 0 ? std::string("nan") : fmt(r.ap[ti][c]))
          << '\n';
    out << "TP@" << t << '\t' << r.tp[ti] << '\n';
    out << "FP@" << t << '\t' << r.fp[ti] << '\n';
    out << "FN@" << t << '\t' << r.fn[ti] << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Experiments

std::uint64_t params_digest(const DetectorParams& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& name : params.names) {
    for (char ch : name) h = (h ^ static_cast<unsigned char>(ch)) * 1099511628211ull;
    for (double v : params.at(name).data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) h = (h ^ ((bits >> (8 * b)) & 0xff)) * 1099511628211ull;
    }
  }
  return h;
}

namespace {

template <typename Fn>
void run_parallel(std::size_t n, std::size_t workers, Fn fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

std::vector<AblationRow> ablate(const TrainConfig& config, const Dataset& train, const Dataset& eval,
                                const DetectorParams& teacher) {
  // Row order follows the paper's ablation table.
  const bool grid[6][3] = {{false, false, false}, {false, false, true}, {false, true, true},
                           {true, false, true},   {true, true, false},  {true, true, true}};
  std::vector<AblationRow> rows(7);
  rows[0].name = "baseline";
  rows[0].baseline = true;
  for (std::size_t i = 0; i < 6; ++i) {
    auto& r = rows[i + 1];
    r.spatial_temporal = grid[i][0];
    r.response = grid[i][1];
    r.weight_inherit = grid[i][2];
    r.name = std::string(r.spatial_temporal ? "ST" : "--") + (r.response ? "R" : "-") + (r.weight_inherit ? "WI" : "--");
  }
  run_parallel(rows.size(), config.workers, [&](std::size_t i) {
    AblationRow& r = rows[i];
    TrainResult trained;
    if (r.baseline) {
      trained = train_teacher(config, train);
    } else {
      TrainConfig c = config;
      c.distill.enable_spatial_temporal = r.spatial_temporal;
      c.distill.enable_response = r.response;
      c.distill.enable_weight_inherit = r.weight_inherit;
      if (r.weight_inherit && c.distill.inherit_mode == InheritMode::kOff)
        c.distill.inherit_mode = InheritMode::kInheritAndFreeze;
      trained = distill_student(c, train, teacher);
    }
    r.digest = params_digest(trained.params);
    r.report = evaluate(trained.params, eval, config.eval);
  });
  return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "row\tspatial_temporal\tresponse\tweight_inherit\tmAP\tmATE\tdelta_mAP\tdelta_mATE\tparams_digest\n";
  const AblationRow* base = nullptr;
  for (const auto& r : rows)
    if (r.baseline) base = &r;
  for (const auto& r : rows) {
    char digest[24];
    std::snprintf(digest, sizeof digest, "%016llx", static_cast<unsigned long long>(r.digest));
    out << r.name << '\t' << (r.baseline ? "-" : r.spatial_temporal ? "1" : "0") << '\t'
        << (r.baseline ? "-" : r.response ? "1" : "0") << '\t' << (r.baseline ? "-" : r.weight_inherit ? "1" : "0")
        << '\t' << fmt(r.report.map) << '\t' << fmt(r.report.mate) << '\t'
        << fmt(base ? r.report.map - base->report.map : 0.0) << '\t'
        << fmt(base ? r.report.mate - base->report.mate : 0.0) << '\t' << digest << '\n';
  }
  return out.str();
}

std::vector<SweepRow> sweep_lambda(const TrainConfig& config, const Dataset& train, const Dataset& eval,
                                   const DetectorParams& teacher, const std::vector<double>& values) {
  std::vector<SweepRow> rows(values.size());
  run_parallel(values.size(), config.workers, [&](std::size_t i) {
    TrainConfig c = config;
    c.distill.lambda = values[i];
    rows[i].lambda = values[i];
    rows[i].report = evaluate(distill_student(c, train, teacher).params, eval, config.eval);
  });
  return rows;
}

std::string format_sweep(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "lambda\tmAP\tmATE\n";
  for (const auto& r : rows) out << fmt_full(r.lambda) << '\t' << fmt(r.report.map) << '\t' << fmt(r.report.mate) << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Visualization data

namespace {

void write_grid(const fs::path& path, const std::vector<double>& values, std::size_t rows, std::size_t cols,
                const std::string& title) {
  std::ofstream out(path);
  out << "# " << title << "; " << rows << "x" << cols << ", row 0 is the most negative y\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out << (c ? "\t" : "") << fmt(values[r * cols + c]);
    out << '\n';
  }
}

std::vector<double> row_max(const Tensor& t) {
  const std::size_t n = t.dim(0), k = t.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i] = std::max(out[i], t.at(i * k + j));
  return out;
}

}  // namespace

std::vector<fs::path> emit_viz(const std::vector<VizModel>& models, const SceneSequence& seq, std::size_t frame,
                               const fs::path& out_dir, double score_threshold) {
  if (frame >= seq.frames.size())
    throw ConfigError("frame " + std::to_string(frame) + " out of range for a " +
                      std::to_string(seq.frames.size()) + "-frame sequence");
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  const SceneFrame& cur = seq.frames[frame];
  for (const VizModel& m : models) {
    const DetectorParams& p = *m.params;
    const BEVGrid& grid = p.config.grid;
    ForwardResult out;
    {
      NoGradGuard guard;
      out = frame == 0 ? forward(p, seq.rig, cur, std::nullopt)
                       : forward_window(p, seq.rig, seq.frames[frame - 1], cur);
    }
    const Tensor resp = bev_response(out.e_bev);
    const std::vector<double> resp_v(resp.data().begin(), resp.data().end());
    const std::string stem = m.label + "_";
    auto emit = [&](const std::string& name, const std::vector<double>& v, const std::string& title) {
      io::write_f64(out_dir / (stem + name + ".f64"), v);
      write_grid(out_dir / (stem + name + ".txt"), v, grid.rows, grid.cols, title);
      written.push_back(out_dir / (stem + name + ".txt"));
      written.push_back(out_dir / (stem + name + ".f64"));
    };
    emit("response", resp_v, "BEV response (channel mean of |E_BEV|)");
    const std::size_t last = out.record.a_temporal.size() - 1;
    emit("temporal_attn_max", row_max(out.record.a_temporal[last]), "max temporal attention weight, last layer");
    emit("spatial_attn_max", row_max(out.record.a_spatial[last]), "max spatial attention weight, last layer");
    io::write_f64(out_dir / (stem + "temporal_attn.f64"), out.record.a_temporal[last].data());
    io::write_f64(out_dir / (stem + "spatial_attn.f64"), out.record.a_spatial[last].data());
    written.push_back(out_dir / (stem + "temporal_attn.f64"));
    written.push_back(out_dir / (stem + "spatial_attn.f64"));

    // Box overlay: G marks ground-truth centres, P predictions, * both.
    const auto gts = boxes_in_grid(cur.boxes, grid);
    const auto preds = decode_predictions(out.dets, score_threshold);
    std::vector<char> cells(grid.num_pillars(), '.');
    auto mark = [&](double x, double y, char ch) {
      const auto g = grid.grid_coord(x, y);
      const long c = std::lround(g[0]), r = std::lround(g[1]);
      if (c < 0 || r < 0 || c >= static_cast<long>(grid.cols) || r >= static_cast<long>(grid.rows)) return;
      char& cell = cells[static_cast<std::size_t>(r) * grid.cols + static_cast<std::size_t>(c)];
      cell = (cell == '.' || cell == ch) ? ch : '*';
    };
    for (const auto& g : gts) mark(g.center[0], g.center[1], 'G');
    for (const auto& pr : preds) mark(pr.x, pr.y, 'P');
    std::ofstream overlay(out_dir / (stem + "boxes.txt"));
    overlay << "# G ground truth, P prediction (score >= " << fmt(score_threshold) << "), * both; row 0 is the most negative y\n";
    for (std::size_t r = 0; r < grid.rows; ++r) overlay << std::string(cells.begin() + r * grid.cols, cells.begin() + (r + 1) * grid.cols) << '\n';
    overlay << "\nkind\tclass\tscore\tx\ty\n";
    for (const auto& g : gts) overlay << "gt\t" << g.class_id << "\t1\t" << fmt(g.center[0]) << '\t' << fmt(g.center[1]) << '\n';
    for (const auto& pr : preds)
      overlay << "pred\t" << pr.label << '\t' << fmt(pr.score) << '\t' << fmt(pr.x) << '\t' << fmt(pr.y) << '\n';
    written.push_back(out_dir / (stem + "boxes.txt"));
  }
  return written;
}

}  // namespace bevkd
