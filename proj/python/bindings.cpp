#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "pspseg/checkpoint.hpp"
#include "pspseg/data.hpp"
#include "pspseg/errors.hpp"
#include "pspseg/pruning.hpp"
#include "pspseg/trainer.hpp"

namespace py = pybind11;
using nlohmann::json;

// JSON crosses the boundary as text; the Python side decodes it.
namespace {

template <class T>
py::array_t<T> grid_array(const pspseg::Dims3& dims, const std::vector<T>& values) {
  py::array_t<T> out({dims[0], dims[1], dims[2]});
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

pspseg::LabelVolume label_volume(const py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>& a,
                                 const pspseg::Spacing3& spacing) {
  if (a.ndim() != 3) throw pspseg::ShapeError("label arrays must be 3-D");
  pspseg::LabelVolume v{{a.shape(0), a.shape(1), a.shape(2)}, spacing, {}};
  v.labels.assign(a.data(), a.data() + a.size());
  return v;
}

pspseg::TrainConfig config_from(const std::string& path) { return pspseg::read_train_config(path); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "PSP-Seg training, pruning and evaluation core";

  py::register_exception<pspseg::Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<pspseg::ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def(
      "generate_phantom",
      [](std::uint64_t seed, const std::string& spec_json) {
        pspseg::PhantomSpec spec;
        if (!spec_json.empty()) spec = json::parse(spec_json).get<pspseg::PhantomSpec>();
        const auto [img, lab] = pspseg::generate_phantom(seed, spec);
        return py::make_tuple(grid_array(img.dims, img.voxels), grid_array(lab.dims, lab.labels));
      },
      py::arg("seed"), py::arg("spec_json") = "");

  m.def("generate_dataset",
        [](const std::filesystem::path& out, std::size_t count, std::array<std::int64_t, 3> dims, std::uint64_t seed,
           double test_fraction) {
          const auto spec = pspseg::PhantomSpec::for_dims(dims);
          const auto manifest = pspseg::generate_dataset(out, count, spec, seed, test_fraction);
          return manifest.cases.size();
        },
        py::arg("out"), py::arg("count"), py::arg("dims"), py::arg("seed"), py::arg("test_fraction") = 0.2);

  m.def(
      "dice_score",
      [](const py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>& gt, int cls) {
        return pspseg::dice_score(label_volume(pred, {1, 1, 1}), label_volume(gt, {1, 1, 1}), cls);
      },
      py::arg("pred"), py::arg("gt"), py::arg("cls"));

  m.def(
      "nsd_score",
      [](const py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>& gt, int cls, double tolerance_mm,
         pspseg::Spacing3 spacing) {
        return pspseg::nsd_score(label_volume(pred, spacing), label_volume(gt, spacing), cls, tolerance_mm);
      },
      py::arg("pred"), py::arg("gt"), py::arg("cls"), py::arg("tolerance_mm") = 2.0,
      py::arg("spacing") = pspseg::Spacing3{1, 1, 1});

  m.def(
      "eb_parameter_count",
      [](pspseg::Index3 kernel, std::int64_t channels) {
        return pspseg::EfficientBlockSpec{kernel, channels, 0.5}.parameter_count();
      },
      py::arg("kernel"), py::arg("channels"));

  m.def("variant_json", [](const std::string& name) { return json(pspseg::ModelConfig::from_variant(name)).dump(); });

  m.def("convergence_check", &pspseg::convergence_check, py::arg("tr_history"), py::arg("rl_history"),
        py::arg("window") = 10, py::arg("floor_epoch") = 0);
  m.def(
      "improvement_check",
      [](double current, double best, double threshold) {
        return pspseg::improvement_check(current, best, threshold) == pspseg::Improvement::OverPruned ? "OverPruned"
                                                                                                     : "Maintained";
      },
      py::arg("current_fd"), py::arg("best_fd"), py::arg("threshold") = 0.01);

  m.def(
      "train_json",
      [](const std::string& config_path, const std::string& resume) {
        const auto cfg = config_from(config_path);
        std::optional<std::filesystem::path> from;
        if (!resume.empty()) from = resume;
        pspseg::TrainResult r;
        {
          py::gil_scoped_release release;
          r = pspseg::train(cfg, from);
        }
        return json{{"epochs", r.records.size()},
                    {"events", r.events},
                    {"initial_params", r.initial_params},
                    {"final_params", r.final_params},
                    {"final_checkpoint", r.final_checkpoint.string()},
                    {"final_metrics", r.final_metrics}}
            .dump();
      },
      py::arg("config_path"), py::arg("resume") = "");

  m.def(
      "evaluate_json",
      [](const std::string& config_path, const std::string& checkpoint, const std::string& split) {
        const auto cfg = config_from(config_path);
        py::gil_scoped_release release;
        return pspseg::evaluate(cfg, checkpoint, split).dump();
      },
      py::arg("config_path"), py::arg("checkpoint"), py::arg("split") = "test");

  m.def("checkpoint_manifest_json",
        [](const std::string& dir) { return pspseg::read_checkpoint_manifest(dir).dump(); });

  m.def("timeline_json",
        [](const std::string& events) { return pspseg::build_timeline(pspseg::read_events(events)).dump(); });
}
