#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cli.hpp"
#include "mkfa/checkpoint.hpp"
#include "mkfa/gradcheck.hpp"
#include "mkfa/parallel.hpp"
#include "mkfa/spectral.hpp"
#include "mkfa/train.hpp"

namespace py = pybind11;
using namespace mkfa;

namespace {

using U8Array = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>;
using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

RgbImage image_from_array(const U8Array& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw std::invalid_argument("expected an H x W x 3 uint8 array");
  RgbImage img(a.shape(1), a.shape(0));
  std::copy(a.data(), a.data() + a.size(), img.data.begin());
  return img;
}

U8Array image_to_array(const RgbImage& img) {
  U8Array a({img.height, img.width, int64_t{3}});
  std::copy(img.data.begin(), img.data.end(), a.mutable_data());
  return a;
}

Plane plane_from_array(const F64Array& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
  Plane p(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), p.v.begin());
  return p;
}

F64Array plane_to_array(const Plane& p) {
  F64Array a({p.height, p.width});
  std::copy(p.v.begin(), p.v.end(), a.mutable_data());
  return a;
}

nlohmann::json parse_json(const std::string& s) { return s.empty() ? nlohmann::json::object() : nlohmann::json::parse(s); }

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

// A float32 model restored from a checkpoint.
class Detector {
 public:
  explicit Detector(const std::string& path) : ck_(load_checkpoint<float>(path)) {}

  std::vector<double> score(const U8Array& batch) const {
    if (batch.ndim() != 4 || batch.shape(3) != 3) throw std::invalid_argument("expected an N x H x W x 3 uint8 array");
    std::vector<RgbImage> imgs;
    const int64_t per = batch.shape(1) * batch.shape(2) * 3;
    for (int64_t i = 0; i < batch.shape(0); ++i) {
      RgbImage img(batch.shape(2), batch.shape(1));
      std::copy(batch.data() + i * per, batch.data() + (i + 1) * per, img.data.begin());
      imgs.push_back(std::move(img));
    }
    std::vector<const RgbImage*> ptrs;
    for (const auto& im : imgs) ptrs.push_back(&im);
    py::gil_scoped_release release;
    return score_images(*ck_.model, ptrs);
  }

  py::object evaluate_dir(const std::string& data_dir, const std::string& split) const {
    EvalReport r;
    {
      py::gil_scoped_release release;
      r = evaluate(*ck_.model, Dataset::load(Manifest::load(data_dir)), split);
    }
    return to_py(r.to_json());
  }

  py::object header() const { return to_py(ck_.header); }
  int64_t num_params() const { return count_params(ck_.model->config()).total; }

 private:
  LoadedCheckpoint<float> ck_;
};

}  // namespace

PYBIND11_MODULE(_mkfa, m) {
  m.doc() = "Bindings for the mkfa detector library";

  m.def("set_num_threads", &set_num_threads, py::arg("n"));
  m.def("num_threads", &num_threads);

  m.def(
      "count_params",
      [](const std::string& name) {
        const ParamCount c = count_params(preset(name));
        py::dict breakdown;
        for (const auto& [k, v] : c.breakdown) breakdown[py::str(k)] = v;
        py::dict out;
        out["total"] = c.total;
        out["breakdown"] = breakdown;
        return out;
      },
      py::arg("preset"));
  m.def("preset_names", &preset_names);

  m.def(
      "auc",
      [](const std::vector<double>& scores, const std::vector<int>& labels) { return auc(scores, labels); },
      py::arg("scores"), py::arg("labels"));

  m.def(
      "read_ppm", [](const std::filesystem::path& p) { return image_to_array(read_ppm(p)); }, py::arg("path"));
  m.def(
      "write_ppm", [](const std::filesystem::path& p, const U8Array& a) { write_ppm(p, image_from_array(a)); },
      py::arg("path"), py::arg("image"));

  m.def(
      "amplitude_spectrum", [](const F64Array& a) { return plane_to_array(amplitude_spectrum(plane_from_array(a))); },
      py::arg("map"));
  m.def(
      "radial_profile",
      [](const F64Array& amplitude, int bins) {
        const RadialProfile r = radial_profile(plane_from_array(amplitude), bins);
        return py::make_tuple(r.freq, r.value);
      },
      py::arg("amplitude"), py::arg("bins") = 32);

  m.def(
      "generate_corpus",
      [](const std::filesystem::path& out, int64_t n_real, int64_t n_fake, double test_fraction,
         const std::string& spec_json) {
        const GeneratorSpec spec = parse_json(spec_json).get<GeneratorSpec>();
        Manifest mf;
        {
          py::gil_scoped_release release;
          mf = gen_corpus(spec, n_real, n_fake, test_fraction, out);
        }
        return to_py(mf.to_json());
      },
      py::arg("out_dir"), py::arg("n_real"), py::arg("n_fake"), py::arg("test_fraction") = 0.2,
      py::arg("spec_json") = "");

  m.def(
      "generate_sample",
      [](const std::string& spec_json, const std::string& kind, uint64_t index) {
        const GeneratorSpec spec = parse_json(spec_json).get<GeneratorSpec>();
        const std::optional<ArtifactKind> k =
            kind.empty() ? std::nullopt : std::optional<ArtifactKind>(parse_artifact_kind(kind));
        return image_to_array(generate_sample(spec, k ? 1 : 0, k, index));
      },
      py::arg("spec_json") = "", py::arg("kind") = "", py::arg("index") = 0);

  m.def(
      "train",
      [](const std::string& data_dir, const std::filesystem::path& out_dir, const std::string& config_json) {
        TrainConfig cfg = parse_json(config_json).get<TrainConfig>();
        cfg.validate();
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train<float>(cfg, Dataset::load(Manifest::load(data_dir)), out_dir);
        }
        py::list rows;
        for (const auto& row : r.metrics) {
          py::dict d;
          d["epoch"] = row.epoch;
          d["step"] = row.step;
          d["loss"] = row.loss;
          d["train_auc"] = row.train_auc;
          d["test_auc"] = row.test_auc ? py::cast(*row.test_auc) : py::none();
          d["lr"] = row.lr;
          rows.append(d);
        }
        return rows;
      },
      py::arg("data_dir"), py::arg("out_dir"), py::arg("config_json") = "");

  m.def(
      "gradcheck",
      [](uint64_t seed, int shapes, double tol) {
        std::vector<OpCheckResult> results;
        {
          py::gil_scoped_release release;
          results = run_gradcheck_suite(seed, shapes, tol);
        }
        py::list out;
        for (const auto& r : results) out.append(py::make_tuple(r.name, r.shape, r.report.max_rel_error, r.report.passed));
        return out;
      },
      py::arg("seed") = 1, py::arg("shapes") = 5, py::arg("tol") = 1e-5);

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "mkfa");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        py::gil_scoped_release release;
        return run_cli(static_cast<int>(argv.size()), argv.data());
      },
      py::arg("args"));

  py::class_<Detector>(m, "Detector")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def("score", &Detector::score, py::arg("images"), "Fake probability per N x H x W x 3 uint8 image")
      .def("evaluate", &Detector::evaluate_dir, py::arg("data_dir"), py::arg("split") = "test")
      .def_property_readonly("header", &Detector::header)
      .def_property_readonly("num_params", &Detector::num_params);
}
