#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "bevkd/errors.hpp"
#include "bevkd/gradcheck_suite.hpp"
#include "bevkd/trainer.hpp"

namespace fs = std::filesystem;
using namespace bevkd;

namespace {

// Flags given on the command line override the config file.
struct TrainOverrides {
  std::string data, eval_data;
  std::optional<std::size_t> steps, workers;
  std::optional<double> lr, lambda;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app) {
    app->add_option("--data", data, "training dataset directory (overrides config 'dataset')");
    app->add_option("--eval-data", eval_data, "evaluation dataset directory");
    app->add_option("--steps", steps, "optimizer steps");
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--seed", seed, "training seed");
    app->add_option("--workers", workers, "parallel rows for ablate / sweep-lambda");
    app->add_option("--lambda", lambda, "distillation weight");
  }

  TrainConfig load(const std::string& path) const {
    TrainConfig c = path.empty() ? TrainConfig{} : load_train_config(path);
    if (!data.empty()) c.dataset = data;
    if (!eval_data.empty()) c.eval_dataset = eval_data;
    for (OptimConfig* o : {&c.optim, &c.teacher_optim}) {
      if (steps) o->steps = *steps;
      if (lr) o->lr = *lr;
      if (seed) o->seed = *seed;
    }
    if (workers) c.workers = *workers;
    if (lambda) c.distill.lambda = *lambda;
    return c;
  }
};

Dataset require_dataset(const std::string& dir, const char* what) {
  if (dir.empty()) throw ConfigError(std::string("no ") + what + " given (set it in the config or pass a flag)");
  return load_dataset(dir);
}

TrainConfig as_teacher(const TrainConfig& c) {
  TrainConfig t = c;
  t.model = c.teacher_model;
  t.optim = c.teacher_optim;
  return t;
}

DetectorParams obtain_teacher(const TrainConfig& c, const std::string& ckpt, const Dataset& train) {
  const std::string path = ckpt.empty() ? c.teacher_ckpt : ckpt;
  if (!path.empty()) return load_checkpoint(path);
  std::cerr << "no teacher checkpoint given; training the teacher (" << c.teacher_optim.steps << " steps)\n";
  return train_teacher(as_teacher(c), train).params;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

void save_run(const TrainResult& r, const TrainConfig& c, const fs::path& out) {
  save_checkpoint(r.params, out);
  write_curve(out / "loss_curve.tsv", r.curve);
  io::write_json(out / "train_config.json", train_config_to_json(c));
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError("cannot parse '" + item + "' as a number");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty value list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structured knowledge distillation for multi-view BEV detection (desk scale)"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-view dataset");
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  SceneConfig scene;
  std::size_t gen_sequences = 24;
  gen->add_option("--seed", gen_seed, "dataset seed")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--views", scene.num_views, "camera views")->capture_default_str();
  gen->add_option("--frames", scene.num_frames, "frames per sequence")->capture_default_str();
  gen->add_option("--objects", scene.num_objects, "objects per sequence")->capture_default_str();
  gen->add_option("--classes", scene.num_classes, "object classes")->capture_default_str();
  gen->add_option("--sequences", gen_sequences, "number of sequences")->capture_default_str();
  gen->add_option("--height", scene.image_height, "image height")->capture_default_str();
  gen->add_option("--width", scene.image_width, "image width")->capture_default_str();

  // train-teacher
  auto* tt = app.add_subcommand("train-teacher", "train a detector on the detection loss alone");
  std::string tt_config, tt_out;
  bool tt_student = false;
  TrainOverrides tt_over;
  tt->add_option("--config", tt_config, "JSON training config")->check(CLI::ExistingFile);
  tt->add_option("--out", tt_out, "checkpoint directory")->required();
  tt->add_flag("--student", tt_student, "train the student architecture ('model'/'optim') instead, the no-KD baseline");
  tt_over.attach(tt);

  // distill
  auto* ds = app.add_subcommand("distill", "train the student under the distillation objective");
  std::string ds_config, ds_teacher, ds_out, ds_inherit;
  std::optional<bool> ds_st, ds_resp, ds_wi;
  TrainOverrides ds_over;
  ds->add_option("--config", ds_config, "JSON training config")->check(CLI::ExistingFile);
  ds->add_option("--teacher", ds_teacher, "teacher checkpoint (overrides config 'teacher_ckpt')");
  ds->add_option("--out", ds_out, "checkpoint directory")->required();
  ds->add_option("--spatial-temporal", ds_st, "enable the attention term (true/false)");
  ds->add_option("--response", ds_resp, "enable the BEV response term (true/false)");
  ds->add_option("--weight-inherit", ds_wi, "enable weight-inheriting (true/false)");
  ds->add_option("--inherit-mode", ds_inherit, "INHERIT_AND_FREEZE, INIT_ONLY or OFF");
  ds_over.attach(ds);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_report;
  std::optional<double> ev_score;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--report", ev_report, "report file (TSV); stdout when omitted");
  ev->add_option("--score-threshold", ev_score, "minimum class probability");

  // ablate
  auto* ab = app.add_subcommand("ablate", "train the module on/off grid and tabulate mAP/mATE deltas");
  std::string ab_config, ab_out, ab_teacher;
  TrainOverrides ab_over;
  ab->add_option("--config", ab_config, "JSON training config")->check(CLI::ExistingFile);
  ab->add_option("--out", ab_out, "table file (TSV)")->required();
  ab->add_option("--teacher", ab_teacher, "teacher checkpoint; trained from the config when absent");
  ab_over.attach(ab);

  // sweep-lambda
  auto* sw = app.add_subcommand("sweep-lambda", "distill once per lambda value");
  std::string sw_config, sw_out, sw_teacher, sw_values;
  TrainOverrides sw_over;
  sw->add_option("--config", sw_config, "JSON training config")->check(CLI::ExistingFile);
  sw->add_option("--values", sw_values, "comma-separated lambda values")->required();
  sw->add_option("--out", sw_out, "table file (TSV)")->required();
  sw->add_option("--teacher", sw_teacher, "teacher checkpoint; trained from the config when absent");
  sw_over.attach(sw);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  bool gc_full = false;
  gc->add_flag("--full", gc_full, "also check the full student forward + distillation loss");

  // emit-viz
  auto* vz = app.add_subcommand("emit-viz", "write response maps, attention maps and box overlays");
  std::string vz_ckpt, vz_kd, vz_nokd, vz_data, vz_out;
  std::size_t vz_frame = 1, vz_seq = 0;
  double vz_score = 0.3;
  vz->add_option("--ckpt", vz_ckpt, "teacher checkpoint")->required();
  vz->add_option("--ckpt-kd", vz_kd, "student trained with KD");
  vz->add_option("--ckpt-nokd", vz_nokd, "student trained without KD");
  vz->add_option("--data", vz_data, "dataset directory")->required();
  vz->add_option("--frame", vz_frame, "frame index")->capture_default_str();
  vz->add_option("--sequence", vz_seq, "sequence index")->capture_default_str();
  vz->add_option("--score-threshold", vz_score, "overlay threshold")->capture_default_str();
  vz->add_option("--out", vz_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      save_dataset(generate_dataset(gen_seed, scene, gen_sequences), gen_out);
      std::cout << "wrote " << gen_sequences << " sequences to " << gen_out << '\n';
    } else if (tt->parsed()) {
      const TrainConfig cfg = tt_over.load(tt_config);
      const TrainConfig run = tt_student ? cfg : as_teacher(cfg);
      const TrainResult r = train_teacher(run, require_dataset(cfg.dataset, "dataset"));
      save_run(r, run, tt_out);
      std::cout << "final loss " << r.curve.back() << "; checkpoint " << tt_out << '\n';
    } else if (ds->parsed()) {
      TrainConfig cfg = ds_over.load(ds_config);
      if (ds_st) cfg.distill.enable_spatial_temporal = *ds_st;
      if (ds_resp) cfg.distill.enable_response = *ds_resp;
      if (ds_wi) cfg.distill.enable_weight_inherit = *ds_wi;
      if (!ds_inherit.empty()) cfg.distill.inherit_mode = parse_inherit_mode(ds_inherit);
      const std::string teacher_path = ds_teacher.empty() ? cfg.teacher_ckpt : ds_teacher;
      if (teacher_path.empty()) throw ConfigError("distill needs a teacher checkpoint (--teacher or 'teacher_ckpt')");
      const DetectorParams teacher = load_checkpoint(teacher_path);
      const TrainResult r = distill_student(cfg, require_dataset(cfg.dataset, "dataset"), teacher);
      save_run(r, cfg, ds_out);
      std::cout << "final loss " << r.curve.back() << "; checkpoint " << ds_out << '\n';
    } else if (ev->parsed()) {
      EvalConfig ec;
      if (ev_score) ec.score_threshold = *ev_score;
      const std::string text = format_report(evaluate(load_checkpoint(ev_ckpt), load_dataset(ev_data), ec));
      if (ev_report.empty()) std::cout << text;
      else write_text(ev_report, text);
    } else if (ab->parsed()) {
      const TrainConfig cfg = ab_over.load(ab_config);
      const Dataset train = require_dataset(cfg.dataset, "dataset");
      const Dataset eval = cfg.eval_dataset.empty() ? train : load_dataset(cfg.eval_dataset);
      const DetectorParams teacher = obtain_teacher(cfg, ab_teacher, train);
      const std::string table = format_ablation(ablate(cfg, train, eval, teacher));
      write_text(ab_out, table);
      std::cout << table;
    } else if (sw->parsed()) {
      const TrainConfig cfg = sw_over.load(sw_config);
      const Dataset train = require_dataset(cfg.dataset, "dataset");
      const Dataset eval = cfg.eval_dataset.empty() ? train : load_dataset(cfg.eval_dataset);
      const DetectorParams teacher = obtain_teacher(cfg, sw_teacher, train);
      const std::string table = format_sweep(sweep_lambda(cfg, train, eval, teacher, parse_list(sw_values)));
      write_text(sw_out, table);
      std::cout << table;
    } else if (gc->parsed()) {
      auto cases = op_gradcheck_suite();
      if (gc_full) {
        auto model = model_gradcheck_suite();
        cases.insert(cases.end(), model.begin(), model.end());
      }
      bool ok = true;
      for (const auto& c : cases) {
        std::printf("%-4s %-32s max_rel_err %.3e (tol %.0e, %zu coords)\n", c.passed() ? "ok" : "FAIL", c.name.c_str(),
                    c.error, c.tolerance, c.coordinates);
        ok = ok && c.passed();
      }
      std::printf("%s: %zu cases\n", ok ? "PASS" : "FAIL", cases.size());
      return ok ? 0 : 1;
    } else if (vz->parsed()) {
      const Dataset data = load_dataset(vz_data);
      if (vz_seq >= data.sequences.size()) throw ConfigError("sequence index out of range");
      std::vector<DetectorParams> owned;
      std::vector<std::string> labels;
      owned.push_back(load_checkpoint(vz_ckpt));
      labels.push_back("teacher");
      if (!vz_kd.empty()) {
        owned.push_back(load_checkpoint(vz_kd));
        labels.push_back("student_kd");
      }
      if (!vz_nokd.empty()) {
        owned.push_back(load_checkpoint(vz_nokd));
        labels.push_back("student_nokd");
      }
      std::vector<VizModel> models;
      for (std::size_t i = 0; i < owned.size(); ++i) models.push_back({labels[i], &owned[i]});
      for (const auto& f : emit_viz(models, data.sequences[vz_seq], vz_frame, vz_out, vz_score))
        std::cout << f.string() << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
