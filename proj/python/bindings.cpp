#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "bevkd/distill.hpp"
#include "bevkd/errors.hpp"
#include "bevkd/gradcheck_suite.hpp"
#include "bevkd/trainer.hpp"

namespace py = pybind11;
using namespace bevkd;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  const auto src = t.data();
  std::copy(src.begin(), src.end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["map"] = r.map;
  d["mate"] = r.mate;
  d["num_frames"] = r.num_frames;
  d["thresholds"] = r.thresholds;
  d["class_ap"] = r.class_ap;
  d["ap"] = r.ap;
  d["tp"] = r.tp;
  d["fp"] = r.fp;
  d["fn"] = r.fn;
  return d;
}

SceneConfig scene_config(std::size_t views, std::size_t frames, std::size_t objects, std::size_t classes,
                         std::size_t height, std::size_t width) {
  SceneConfig c;
  c.num_views = views;
  c.num_frames = frames;
  c.num_objects = objects;
  c.num_classes = classes;
  c.image_height = height;
  c.image_width = width;
  return c;
}

}  // namespace

PYBIND11_MODULE(_bevkd, m) {
  m.doc() = "Structured distillation for multi-view BEV detection";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);

  // --- data -----------------------------------------------------------------
  py::class_<Dataset>(m, "Dataset")
      .def_readonly("seed", &Dataset::seed)
      .def("__len__", [](const Dataset& d) { return d.sequences.size(); })
      .def("num_frames", [](const Dataset& d, std::size_t s) { return d.sequences.at(s).frames.size(); })
      .def("images",
           [](const Dataset& d, std::size_t s, std::size_t t) {
             std::vector<py::array_t<double>> out;
             for (const Tensor& img : d.sequences.at(s).frames.at(t).images) out.push_back(to_numpy(img));
             return out;
           },
           py::arg("sequence"), py::arg("frame"))
      .def("boxes",
           [](const Dataset& d, std::size_t s, std::size_t t) {
             py::list out;
             for (const auto& b : d.sequences.at(s).frames.at(t).boxes) {
               py::dict box;
               box["class_id"] = b.class_id;
               box["center"] = b.center;
               box["size"] = b.size;
               box["yaw"] = b.yaw;
               out.append(box);
             }
             return out;
           },
           py::arg("sequence"), py::arg("frame"));

  m.def("generate_dataset",
        [](std::uint64_t seed, std::size_t sequences, std::size_t views, std::size_t frames, std::size_t objects,
           std::size_t classes, std::size_t height, std::size_t width) {
          return generate_dataset(seed, scene_config(views, frames, objects, classes, height, width), sequences);
        },
        py::arg("seed"), py::arg("sequences") = 24, py::arg("views") = 6, py::arg("frames") = 8,
        py::arg("objects") = 6, py::arg("classes") = 4, py::arg("height") = 32, py::arg("width") = 56);
  m.def("save_dataset", &save_dataset, py::arg("data"), py::arg("path"));
  m.def("load_dataset", &load_dataset, py::arg("path"));

  // --- models ---------------------------------------------------------------
  py::class_<DetectorParams>(m, "Detector")
      .def(py::init([](const std::string& preset, std::uint64_t seed) {
             DetectorConfig c = DetectorConfig::preset(preset);
             c.init_seed = seed;
             return init_params(c);
           }),
           py::arg("preset") = "small", py::arg("seed") = 0)
      .def_readonly("names", &DetectorParams::names)
      .def_property_readonly("frozen", [](const DetectorParams& p) { return p.frozen; })
      .def_property_readonly("num_scalars", &DetectorParams::num_scalars)
      .def_property_readonly("config", [](const DetectorParams& p) { return config_to_json(p.config).dump(); })
      .def("param", [](const DetectorParams& p, const std::string& name) { return to_numpy(p.at(name)); })
      .def("set_param",
           [](DetectorParams& p, const std::string& name, const py::array_t<double>& value) {
             const Tensor t = from_numpy(value);
             Tensor& dst = p.at(name);
             if (t.shape() != dst.shape())
               throw DimensionError(name + ": expected " + shape_str(dst.shape()) + ", got " + shape_str(t.shape()));
             std::copy(t.data().begin(), t.data().end(), dst.mutable_data().begin());
           })
      .def("clone", &DetectorParams::clone)
      .def("digest", &params_digest)
      .def("save", [](const DetectorParams& p, const std::filesystem::path& dir) { save_checkpoint(p, dir); })
      .def_static("load", &load_checkpoint)
      .def("forward",
           [](const DetectorParams& p, const Dataset& d, std::size_t s, std::size_t t) {
             if (t == 0) throw ConfigError("forward needs a previous frame; frame must be >= 1");
             const auto& seq = d.sequences.at(s);
             NoGradGuard guard;
             const auto out = forward_window(p, seq.rig, seq.frames.at(t - 1), seq.frames.at(t));
             py::dict r;
             r["boxes"] = to_numpy(out.dets.boxes);
             r["probs"] = to_numpy(out.dets.probs);
             r["e_bev"] = to_numpy(out.e_bev);
             r["response"] = to_numpy(bev_response(out.e_bev));
             py::list temporal, spatial;
             for (const auto& a : out.record.a_temporal) temporal.append(to_numpy(a));
             for (const auto& a : out.record.a_spatial) spatial.append(to_numpy(a));
             r["a_temporal"] = temporal;
             r["a_spatial"] = spatial;
             return r;
           },
           py::arg("data"), py::arg("sequence"), py::arg("frame"))
      .def("evaluate",
           [](const DetectorParams& p, const Dataset& d, double threshold) {
             EvalConfig c;
             c.score_threshold = threshold;
             return report_dict(evaluate(p, d, c));
           },
           py::arg("data"), py::arg("score_threshold") = EvalConfig{}.score_threshold)
      .def("report",
           [](const DetectorParams& p, const Dataset& d, double threshold) {
             EvalConfig c;
             c.score_threshold = threshold;
             return format_report(evaluate(p, d, c));
           },
           py::arg("data"), py::arg("score_threshold") = EvalConfig{}.score_threshold);

  // --- training -------------------------------------------------------------
  // Configs travel as JSON text in the same schema as the CLI config files.
  auto parse = [](const std::string& json) {
    return train_config_from_json(io::Json::parse(json), "<python>");
  };
  m.def("default_config", [] { return train_config_to_json(TrainConfig{}).dump(2); });
  m.def("load_config", [](const std::filesystem::path& p) { return train_config_to_json(load_train_config(p)).dump(2); });
  m.def("train",
        [parse](const std::string& config, const Dataset& data) {
          TrainConfig c = parse(config);
          TrainResult r;
          {
            py::gil_scoped_release release;
            r = train_teacher(c, data);
          }
          return py::make_tuple(std::move(r.params), r.curve);
        },
        py::arg("config"), py::arg("data"), "Detection-only training of config['model'].");
  m.def("distill",
        [parse](const std::string& config, const Dataset& data, const DetectorParams& teacher) {
          TrainConfig c = parse(config);
          TrainResult r;
          {
            py::gil_scoped_release release;
            r = distill_student(c, data, teacher);
          }
          return py::make_tuple(std::move(r.params), r.curve);
        },
        py::arg("config"), py::arg("data"), py::arg("teacher"));
  m.def("ablate",
        [parse](const std::string& config, const Dataset& train, const Dataset& eval, const DetectorParams& teacher) {
          const TrainConfig c = parse(config);
          std::vector<AblationRow> rows;
          {
            py::gil_scoped_release release;
            rows = ablate(c, train, eval, teacher);
          }
          py::list out;
          for (const auto& r : rows) {
            py::dict d = report_dict(r.report);
            d["name"] = r.name;
            d["baseline"] = r.baseline;
            d["digest"] = r.digest;
            out.append(d);
          }
          return py::make_tuple(out, format_ablation(rows));
        },
        py::arg("config"), py::arg("train"), py::arg("eval"), py::arg("teacher"));

  // --- losses and geometry --------------------------------------------------
  m.def("bev_response", [](const py::array_t<double>& e) { return to_numpy(bev_response(from_numpy(e))); });
  m.def("response_loss", [](const py::array_t<double>& s, const py::array_t<double>& t) {
    return response_loss(from_numpy(s), from_numpy(t)).item();
  });
  m.def("total_loss",
        [](double l_orig, double l_st, double l_resp, double lambda) {
          DistillConfig c;
          c.lambda = lambda;
          return total_loss(Tensor::scalar(l_orig), Tensor::scalar(l_st), Tensor::scalar(l_resp), c).item();
        },
        py::arg("l_original"), py::arg("l_spatial_temp"), py::arg("l_response"), py::arg("lambda_") = 1e-2);
  m.def("default_layer_map", &default_layer_map);
  m.def("hit_views",
        [](const std::string& preset, std::size_t views, std::size_t pillar) {
          const DetectorConfig c = DetectorConfig::preset(preset);
          return hit_views(c.grid, CameraRig::surround(views, c.image_height, c.image_width), pillar);
        },
        py::arg("preset"), py::arg("views"), py::arg("pillar"));

  m.def("gradcheck", [](bool full) {
    auto cases = op_gradcheck_suite();
    if (full) {
      const auto model = model_gradcheck_suite();
      cases.insert(cases.end(), model.begin(), model.end());
    }
    py::list out;
    for (const auto& c : cases) out.append(py::make_tuple(c.name, c.error, c.tolerance, c.passed()));
    return out;
  }, py::arg("full") = false);
}
