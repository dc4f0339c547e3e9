// Acceptance suite: one PASS/FAIL line per criterion.
//
//   bevkd_acceptance            all criteria
//   bevkd_acceptance 1 2 6      a subset
//
// Criteria 5, 8 and 10 reuse the models trained for criterion 7.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include "bevkd/distill.hpp"
#include "bevkd/gradcheck_suite.hpp"
#include "bevkd/trainer.hpp"

namespace fs = std::filesystem;
using namespace bevkd;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

void detail(const char* fmt, auto... args) {
  std::printf("    ");
  std::printf(fmt, args...);
  std::printf("\n");
  std::fflush(stdout);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto x = a.data(), y = b.data();
  return std::equal(x.begin(), x.end(), y.begin());
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = io::read_bytes(e.path());
  return files;
}

struct TempDir {
  fs::path path = fs::temp_directory_path() / ("bevkd_acceptance_" + std::to_string(::getpid()));
  TempDir() {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// --- the desk-scale KD experiment (criterion 7, reused by 5, 8 and 10) ---------

constexpr std::uint64_t kSeeds[] = {0, 1, 2, 3, 4};
constexpr std::size_t kTrainSequences = 24;
constexpr std::size_t kTestSequences = 16;
constexpr std::size_t kTeacherSteps = 3000;
constexpr std::size_t kStudentSteps = 2000;
constexpr double kExperimentLambda = 1.0;
constexpr double kBudgetSeconds = 30.0 * 60.0;

TrainConfig experiment_config(std::uint64_t seed) {
  TrainConfig c;
  c.model = DetectorConfig::small();
  c.teacher_model = DetectorConfig::large();
  c.optim.steps = kStudentSteps;
  c.optim.seed = seed;
  c.teacher_optim = c.optim;
  c.teacher_optim.steps = kTeacherSteps;
  c.distill.lambda = kExperimentLambda;
  return c;
}

struct SeedRun {
  std::uint64_t seed = 0;
  Dataset train, test;
  DetectorParams teacher, nokd, kd;
  EvalReport teacher_report, nokd_report, kd_report;
  double seconds = 0.0;
};

SeedRun run_seed(std::uint64_t seed) {
  const auto t0 = Clock::now();
  SeedRun r;
  r.seed = seed;
  r.train = generate_dataset(derive_seed(seed, 10), SceneConfig{}, kTrainSequences);
  r.test = generate_dataset(derive_seed(seed, 11), SceneConfig{}, kTestSequences);
  const TrainConfig cfg = experiment_config(seed);
  TrainConfig tcfg = cfg;
  tcfg.model = cfg.teacher_model;
  tcfg.optim = cfg.teacher_optim;
  r.teacher = train_teacher(tcfg, r.train).params;
  r.nokd = train_teacher(cfg, r.train).params;
  r.kd = distill_student(cfg, r.train, r.teacher).params;
  r.teacher_report = evaluate(r.teacher, r.test, cfg.eval);
  r.nokd_report = evaluate(r.nokd, r.test, cfg.eval);
  r.kd_report = evaluate(r.kd, r.test, cfg.eval);
  r.seconds = seconds_since(t0);
  return r;
}

struct Experiment {
  std::vector<SeedRun> runs;
  double seconds = 0.0;
  std::size_t workers = 1;
};

const Experiment& experiment() {
  static std::unique_ptr<Experiment> cached;
  if (cached) return *cached;
  cached = std::make_unique<Experiment>();
  const std::size_t n = std::size(kSeeds);
  cached->workers = std::clamp<std::size_t>(std::thread::hardware_concurrency(), 1, n);
  cached->runs.resize(n);
  std::mutex print;
  const auto t0 = Clock::now();
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < cached->workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += cached->workers) {
        cached->runs[i] = run_seed(kSeeds[i]);
        const SeedRun& r = cached->runs[i];
        std::lock_guard lock(print);
        detail("seed %llu: teacher mAP %.4f | student no-KD mAP %.4f mATE %.3f | student KD mAP %.4f mATE %.3f (%.0f s)",
               static_cast<unsigned long long>(r.seed), r.teacher_report.map, r.nokd_report.map, r.nokd_report.mate,
               r.kd_report.map, r.kd_report.mate, r.seconds);
      }
    });
  for (auto& t : pool) t.join();
  cached->seconds = seconds_since(t0);
  return *cached;
}

// --- criteria ------------------------------------------------------------------------

Outcome criterion1() {
  const auto t0 = Clock::now();
  auto cases = op_gradcheck_suite();
  const auto model = model_gradcheck_suite();
  cases.insert(cases.end(), model.begin(), model.end());
  const double elapsed = seconds_since(t0);
  double worst_op = 0.0, worst_model = 0.0;
  bool ok = true;
  for (const auto& c : cases) {
    if (!c.passed()) detail("FAIL %s: %.3e > %.0e", c.name.c_str(), c.error, c.tolerance);
    ok = ok && c.passed();
    (c.tolerance < 1e-5 ? worst_op : worst_model) = std::max(c.tolerance < 1e-5 ? worst_op : worst_model, c.error);
  }
  ok = ok && elapsed <= 60.0;
  char buf[200];
  std::snprintf(buf, sizeof buf, "%zu cases; worst op %.2e (tol 1e-6), worst end-to-end %.2e (tol 1e-4); %.1f s (limit 60 s)",
                cases.size(), worst_op, worst_model, elapsed);
  return {ok, buf};
}

struct IdentityFixture {
  SceneSequence seq;
  IdentityFixture() {
    SceneConfig s;
    s.num_frames = 2;
    seq = generate_sequence(77, s);
  }
};

Outcome criterion2() {
  const IdentityFixture fx;
  DetectorConfig cfg = DetectorConfig::small();
  cfg.init_seed = 5;
  const DetectorParams teacher = init_params(cfg);
  DetectorParams student = init_params(DetectorConfig::small());
  for (const auto& name : teacher.names) {
    const auto src = teacher.at(name).data();
    std::copy(src.begin(), src.end(), student.at(name).mutable_data().begin());
  }
  const auto& f = fx.seq.frames;
  const auto s = forward_window(student, fx.seq.rig, f[0], f[1]);
  const auto t = forward_window(teacher, fx.seq.rig, f[0], f[1]);
  const double l_st = spatial_temporal_loss(s.record, t.record, default_layer_map(2, 2)).item();
  const double l_resp = response_loss(s.e_bev, t.e_bev).item();
  const Tensor l_orig = detection_loss(s.dets, boxes_in_grid(f[1].boxes, cfg.grid));
  const double total = total_loss(l_orig, Tensor::scalar(l_st), Tensor::scalar(l_resp), DistillConfig{}).item();
  char buf[200];
  std::snprintf(buf, sizeof buf, "L_st %.1e, L_resp %.1e (tol 1e-12); total - L_orig = %.1e (exact)", l_st, l_resp,
                total - l_orig.item());
  return {std::abs(l_st) <= 1e-12 && std::abs(l_resp) <= 1e-12 && total == l_orig.item(), buf};
}

Outcome criterion3() {
  const IdentityFixture fx;
  const DetectorParams teacher = init_params(DetectorConfig::large());
  DetectorConfig scfg = DetectorConfig::small();
  scfg.init_seed = 9;
  const DetectorParams student = init_params(scfg);
  const auto& f = fx.seq.frames;
  const auto s = forward_window(student, fx.seq.rig, f[0], f[1]);
  const auto t = forward_window(teacher, fx.seq.rig, f[0], f[1]);
  const Tensor l_orig = detection_loss(s.dets, boxes_in_grid(f[1].boxes, scfg.grid));
  const Tensor l_st = spatial_temporal_loss(s.record, t.record, default_layer_map(2, 3));
  const Tensor l_resp = response_loss(s.e_bev, t.e_bev);
  const double kd = l_st.item() + l_resp.item();
  const double lambdas[] = {0.0, 1e-3, 1e-2};
  double worst = 0.0;
  for (double a : lambdas)
    for (double b : lambdas) {
      DistillConfig ca, cb;
      ca.lambda = a;
      cb.lambda = b;
      const double diff = total_loss(l_orig, l_st, l_resp, cb).item() - total_loss(l_orig, l_st, l_resp, ca).item();
      worst = std::max(worst, std::abs(diff - (b - a) * kd));
    }
  char buf[200];
  std::snprintf(buf, sizeof buf, "L_st + L_resp = %.4e; worst |dL - dlambda*(L_st+L_resp)| = %.1e (tol 1e-12)", kd, worst);
  return {worst <= 1e-12 && kd > 0.0, buf};
}

Outcome criterion4() {
  SceneConfig s;
  const Dataset data = generate_dataset(4242, s, 3);
  TrainConfig cfg = experiment_config(4);
  cfg.optim.steps = 200;
  DetectorConfig tcfg = DetectorConfig::large();
  tcfg.init_seed = 99;
  const DetectorParams teacher = init_params(tcfg);

  cfg.distill.inherit_mode = InheritMode::kInheritAndFreeze;
  const DetectorParams frozen = distill_student(cfg, data, teacher).params;
  cfg.distill.inherit_mode = InheritMode::kInitOnly;
  const DetectorParams init_only = distill_student(cfg, data, teacher).params;

  const bool freeze_ok = bitwise_equal(frozen.at("bev_queries"), teacher.at("bev_queries")) &&
                         bitwise_equal(frozen.at("pos_encoding"), teacher.at("pos_encoding"));
  const bool init_ok = !bitwise_equal(init_only.at("bev_queries"), teacher.at("bev_queries")) &&
                       !bitwise_equal(init_only.at("pos_encoding"), teacher.at("pos_encoding"));
  double drift = 0.0;
  for (const char* name : {"bev_queries", "pos_encoding"})
    for (std::size_t i = 0; i < teacher.at(name).numel(); ++i)
      drift = std::max(drift, std::abs(init_only.at(name).at(i) - teacher.at(name).at(i)));
  char buf[200];
  std::snprintf(buf, sizeof buf, "200 steps: INHERIT_AND_FREEZE bitwise equal = %s; INIT_ONLY differs = %s (max drift %.2e)",
                freeze_ok ? "yes" : "no", init_ok ? "yes" : "no", drift);
  return {freeze_ok && init_ok, buf};
}

// Worst deviation from unit sum over every softmax group of every record in a full pass.
double normalization_error(const DetectorParams& params, const Dataset& data, std::size_t& groups) {
  NoGradGuard guard;
  const std::size_t k = params.config.num_points, r = params.config.grid.num_ref();
  double worst = 0.0;
  for (const auto& seq : data.sequences)
    for (std::size_t t = 1; t < seq.frames.size(); ++t) {
      const auto out = forward_window(params, seq.rig, seq.frames[t - 1], seq.frames[t]);
      const auto& rec = out.record;
      const std::size_t views = rec.num_views;
      for (const Tensor& a : rec.a_temporal)
        for (std::size_t g = 0; g < a.numel() / k; ++g) {
          double s = 0.0;
          for (std::size_t i = 0; i < k; ++i) s += a.at(g * k + i);
          worst = std::max(worst, std::abs(s - 1.0));
          ++groups;
        }
      for (const Tensor& a : rec.a_spatial)
        for (std::size_t g = 0; g < a.numel() / k; ++g) {
          const std::size_t p = g / (views * r), v = (g / r) % views;
          if (!rec.view_hit[p * views + v]) continue;  // zero-filled block
          double s = 0.0;
          for (std::size_t i = 0; i < k; ++i) s += a.at(g * k + i);
          worst = std::max(worst, std::abs(s - 1.0));
          ++groups;
        }
    }
  return worst;
}

Outcome criterion5() {
  const SeedRun& r = experiment().runs.front();
  std::size_t groups = 0;
  double worst = 0.0;
  for (const DetectorParams* p : {&r.teacher, &r.nokd, &r.kd}) worst = std::max(worst, normalization_error(*p, r.test, groups));
  char buf[200];
  std::snprintf(buf, sizeof buf, "%zu softmax groups over %zu windows x 3 models; worst |sum - 1| = %.1e (tol 1e-9)",
                groups, r.test.sequences.size() * (r.test.sequences[0].frames.size() - 1), worst);
  return {worst <= 1e-9, buf};
}

// Independent pinhole projection of the pillar's reference points.
std::vector<std::size_t> oracle_hit_views(const BEVGrid& grid, const CameraRig& rig, std::size_t p) {
  const double x = -grid.extent + (static_cast<double>(p % grid.cols) + 0.5) * 2.0 * grid.extent / grid.cols;
  const double y = -grid.extent + (static_cast<double>(p / grid.cols) + 0.5) * 2.0 * grid.extent / grid.rows;
  std::vector<std::size_t> hits;
  for (std::size_t v = 0; v < rig.size(); ++v) {
    const Camera& c = rig.views[v];
    for (double z : grid.z_samples) {
      const double pt[3] = {x, y, z};
      double cam[3];
      for (int i = 0; i < 3; ++i)
        cam[i] = c.rotation[3 * i] * pt[0] + c.rotation[3 * i + 1] * pt[1] + c.rotation[3 * i + 2] * pt[2] + c.translation[i];
      if (cam[2] <= 0.0) continue;
      const double u = c.fx * cam[0] / cam[2] + c.cx, w = c.fy * cam[1] / cam[2] + c.cy;
      if (u >= 0.0 && u < static_cast<double>(c.width) && w >= 0.0 && w < static_cast<double>(c.height)) {
        hits.push_back(v);
        break;
      }
    }
  }
  return hits;
}

Outcome criterion6() {
  const DetectorConfig cfg = DetectorConfig::small();
  const CameraRig rig = CameraRig::surround(6, cfg.image_height, cfg.image_width);
  std::mt19937_64 rng(606);
  double worst = 0.0;
  std::size_t trials = 0;
  for (const Camera& cam : rig.views) {
    std::uniform_real_distribution<double> u(0.0, cam.width), v(0.0, cam.height), d(0.2, 50.0);
    for (int i = 0; i < 2000; ++i) {
      const Projection px{u(rng), v(rng), d(rng)};
      const auto back = project(back_project(px, cam), cam);
      ++trials;
      if (!back) {
        worst = INFINITY;
        continue;
      }
      worst = std::max({worst, std::abs(back->u - px.u), std::abs(back->v - px.v), std::abs(back->depth - px.depth)});
    }
  }
  std::size_t mismatched = 0, empty = 0;
  for (std::size_t p = 0; p < cfg.grid.num_pillars(); ++p) {
    const auto got = hit_views(cfg.grid, rig, p);
    mismatched += got != oracle_hit_views(cfg.grid, rig, p);
    empty += got.empty();
  }
  char buf[200];
  std::snprintf(buf, sizeof buf, "round-trip worst %.1e over %zu points (tol 1e-9); hit_views mismatches %zu of %zu pillars (%zu empty)",
                worst, trials, mismatched, cfg.grid.num_pillars(), empty);
  return {worst <= 1e-9 && mismatched == 0, buf};
}

Outcome criterion7() {
  const Experiment& e = experiment();
  double kd = 0.0, nokd = 0.0, teacher = 0.0;
  std::size_t wins = 0;
  for (const auto& r : e.runs) {
    kd += r.kd_report.map;
    nokd += r.nokd_report.map;
    teacher += r.teacher_report.map;
    wins += r.kd_report.map > r.nokd_report.map;
  }
  const double n = static_cast<double>(e.runs.size());
  char buf[300];
  std::snprintf(buf, sizeof buf,
                "mean mAP KD %.4f vs no-KD %.4f (teacher %.4f); KD ahead on %zu of %zu seeds; %.1f min on %zu thread(s) (budget 30 min)",
                kd / n, nokd / n, teacher / n, wins, e.runs.size(), e.seconds / 60.0, e.workers);
  return {kd / n > nokd / n && e.seconds <= kBudgetSeconds, buf};
}

Outcome criterion8() {
  const SeedRun& r = experiment().runs.front();
  TrainConfig cfg = experiment_config(r.seed);
  cfg.optim.steps = 150;
  cfg.workers = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  const auto rows = ablate(cfg, r.train, r.test, r.teacher);
  const std::string table = format_ablation(rows);
  std::size_t lines = 0;
  for (char ch : table) lines += ch == '\n';
  std::printf("%s", table.c_str());
  const AblationRow* base = nullptr;
  const AblationRow* all_off = nullptr;
  std::set<std::string> combos;
  for (const auto& row : rows) {
    if (row.baseline) base = &row;
    else {
      combos.insert(row.name);
      if (!row.spatial_temporal && !row.response && !row.weight_inherit) all_off = &row;
    }
  }
  const bool bitwise = base && all_off && base->digest == all_off->digest &&
                       format_report(base->report) == format_report(all_off->report);
  char buf[200];
  std::snprintf(buf, sizeof buf, "%zu rows (%zu module combinations + baseline, %zu table lines); all-off row bit-identical to baseline = %s",
                rows.size(), combos.size(), lines, bitwise ? "yes" : "no");
  return {rows.size() == 7 && combos.size() == 6 && lines == 8 && bitwise, buf};
}

Outcome criterion9() {
  TempDir tmp;
  SceneConfig s;
  s.num_frames = 3;
  const Dataset data = generate_dataset(909, s, 3);
  save_dataset(data, tmp.path / "d1");
  const Dataset loaded = load_dataset(tmp.path / "d1");
  save_dataset(loaded, tmp.path / "d2");
  const Dataset again = generate_dataset(909, s, 3);
  save_dataset(again, tmp.path / "d3");
  const auto d1 = snapshot(tmp.path / "d1");
  const bool data_ok = d1 == snapshot(tmp.path / "d2") && d1 == snapshot(tmp.path / "d3");

  TrainConfig cfg = experiment_config(9);
  cfg.optim.steps = 40;
  const auto a = train_teacher(cfg, loaded);
  const auto b = train_teacher(cfg, loaded);
  save_checkpoint(a.params, tmp.path / "c1");
  save_checkpoint(b.params, tmp.path / "c2");
  const bool ckpt_ok = snapshot(tmp.path / "c1") == snapshot(tmp.path / "c2") && a.curve == b.curve;

  const std::string r1 = format_report(evaluate(a.params, data, cfg.eval));
  const std::string r2 = format_report(evaluate(load_checkpoint(tmp.path / "c2"), load_dataset(tmp.path / "d2"), cfg.eval));
  const bool report_ok = r1 == r2;
  char buf[200];
  std::snprintf(buf, sizeof buf, "dataset save/load/save byte-identical (%zu files) = %s; checkpoints = %s; reports = %s",
                d1.size(), data_ok ? "yes" : "no", ckpt_ok ? "yes" : "no", report_ok ? "yes" : "no");
  return {data_ok && ckpt_ok && report_ok, buf};
}

Outcome criterion10() {
  const Experiment& e = experiment();
  std::size_t passing = 0;
  for (const auto& r : e.runs) {
    NoGradGuard guard;
    const BEVGrid& grid = r.teacher.config.grid;
    double at_gt = 0.0, global = 0.0;
    std::size_t n_gt = 0, n_all = 0;
    for (const auto& seq : r.test.sequences)
      for (std::size_t t = 1; t < seq.frames.size(); ++t) {
        const auto out = forward_window(r.teacher, seq.rig, seq.frames[t - 1], seq.frames[t]);
        const Tensor resp = bev_response(out.e_bev);
        for (double v : resp.data()) global += v;
        n_all += resp.numel();
        std::set<std::size_t> occupied;
        for (const auto& b : boxes_in_grid(seq.frames[t].boxes, grid)) {
          const auto g = grid.grid_coord(b.center[0], b.center[1]);
          const auto c = static_cast<std::size_t>(std::clamp<long>(std::lround(g[0]), 0, static_cast<long>(grid.cols) - 1));
          const auto rr = static_cast<std::size_t>(std::clamp<long>(std::lround(g[1]), 0, static_cast<long>(grid.rows) - 1));
          occupied.insert(rr * grid.cols + c);
        }
        for (std::size_t p : occupied) at_gt += resp.at(p);
        n_gt += occupied.size();
      }
    const double m_gt = at_gt / static_cast<double>(n_gt), m_all = global / static_cast<double>(n_all);
    passing += m_gt > m_all;
    detail("seed %llu: mean response at object pillars %.5f vs global %.5f (ratio %.3f)",
           static_cast<unsigned long long>(r.seed), m_gt, m_all, m_gt / m_all);
  }
  char buf[120];
  std::snprintf(buf, sizeof buf, "object-pillar response above global mean on %zu of %zu teachers (need 4)", passing,
                e.runs.size());
  return {passing >= 4, buf};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient suite", criterion1},
      {"identity distillation", criterion2},
      {"lambda affinity", criterion3},
      {"weight-inheriting contract", criterion4},
      {"attention normalization", criterion5},
      {"geometry oracles", criterion6},
      {"directional KD benefit", criterion7},
      {"ablation structure", criterion8},
      {"determinism and round-trips", criterion9},
      {"response semantics", criterion10},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) {
    const int c = std::atoi(argv[i]);
    if (c < 1 || c > static_cast<int>(criteria.size())) {
      std::fprintf(stderr, "unknown criterion '%s'\n", argv[i]);
      return 2;
    }
    selected.insert(static_cast<std::size_t>(c));
  }
  if (selected.empty())
    for (std::size_t i = 1; i <= criteria.size(); ++i) selected.insert(i);

  std::size_t failed = 0;
  for (std::size_t i : selected) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i - 1].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %zu %s: %s: %s [%.1f s]\n", i, o.pass ? "PASS" : "FAIL", criteria[i - 1].first,
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%zu of %zu criteria passed\n", selected.size() - failed, selected.size());
  return failed == 0 ? 0 : 1;
}
