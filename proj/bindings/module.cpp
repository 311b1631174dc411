// Copyright (c) the prf project authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Python surface: numpy in, numpy out. Arrays are copied at the boundary;
// the C++ side keeps sole ownership of its buffers.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "prf/datakit.hpp"
#include "prf/errors.hpp"
#include "prf/filterbank.hpp"
#include "prf/harness.hpp"
#include "prf/objectives.hpp"
#include "prf/pipeline.hpp"
#include "prf/rng.hpp"
#include "prf/tensor.hpp"

namespace py = pybind11;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

prf::Tensor tensor_from(const DoubleArray& a) {
  std::vector<int> shape(static_cast<std::size_t>(a.ndim()));
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<std::size_t>(i)] =
      static_cast<int>(a.shape(i));
  prf::Tensor t(shape);
  std::memcpy(t.data(), a.data(), static_cast<std::size_t>(t.size()) * sizeof(double));
  return t;
}

py::array_t<double> array_from(const prf::Tensor& t) {
  std::vector<py::ssize_t> shape(static_cast<std::size_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) shape[static_cast<std::size_t>(i)] = t.dim(i);
  py::array_t<double> a(shape);
  std::memcpy(a.mutable_data(), t.data(), static_cast<std::size_t>(t.size()) * sizeof(double));
  return a;
}

prf::RgbImage image_from(const DoubleArray& a) {
  if (a.ndim() != 3 || a.shape(2) != 3)
    throw std::invalid_argument("image must be an [H,W,3] float array");
  return prf::RgbImage{tensor_from(a)};
}

py::dict sample_to_dict(const prf::Sample& s) {
  py::dict d;
  d["image"] = array_from(s.image.pixels);
  d["mask"] = array_from(s.mask);
  d["label"] = s.label;
  d["provenance"] = s.provenance;
  return d;
}

py::object json_to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

class PyPipeline {
 public:
  explicit PyPipeline(const std::string& config_json) {
    const prf::RunConfig cfg = prf::run_config_from_json(config_json);
    pipeline_ = std::make_unique<prf::Pipeline>(cfg.pipeline);
  }
  explicit PyPipeline(std::unique_ptr<prf::Pipeline> p) : pipeline_(std::move(p)) {}

  static PyPipeline from_checkpoint(const std::string& path) {
    return PyPipeline(prf::pipeline_from_checkpoint(prf::load_checkpoint(path)));
  }

  py::dict predict(const DoubleArray& image) {
    const prf::PipelineOutput out = pipeline_->predict(image_from(image));
    py::dict d;
    d["logits"] = array_from(out.logits);
    d["probabilities"] = array_from(out.probabilities);
    return d;
  }

  py::dict evaluate_manifest(const std::string& manifest_path, bool include_authentic_pixels) {
    const std::vector<prf::ManifestEntry> entries = prf::read_manifest(manifest_path);
    const prf::MetricsReport report =
        prf::evaluate(*pipeline_, entries, include_authentic_pixels);
    return py::dict(json_to_py(nlohmann::json::parse(prf::metrics_to_json(report))));
  }

  prf::Pipeline& get() { return *pipeline_; }

 private:
  std::unique_ptr<prf::Pipeline> pipeline_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "forensics-guided manipulation detection and localization";

  py::register_exception<prf::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<prf::DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<prf::DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);

  m.def(
      "extract_features",
      [](const DoubleArray& image, std::uint64_t seed) {
        prf::Rng rng(seed);
        prf::FilterBank fb("filterbank", rng);
        return array_from(fb.extract_features(image_from(image)).values);
      },
      py::arg("image"), py::arg("seed") = 0,
      "Stacked forensic features [H,W,18]: SRM, constrained, gradient, noise channels.");

  m.def(
      "make_authentic",
      [](int height, int width, std::uint64_t seed) {
        prf::Rng rng(seed);
        return array_from(prf::make_authentic(height, width, rng).pixels);
      },
      py::arg("height"), py::arg("width"), py::arg("seed") = 0);

  m.def(
      "synthesize",
      [](const std::string& kind, int size, std::uint64_t seed) {
        prf::Rng rng(seed);
        const prf::RgbImage base = prf::make_authentic(size, size, rng);
        prf::Sample s;
        if (kind == "splice")
          s = prf::synth_splice(base, prf::make_authentic(size, size, rng), rng);
        else if (kind == "copymove")
          s = prf::synth_copy_move(base, rng);
        else if (kind == "inpaint")
          s = prf::synth_inpaint(base, rng);
        else if (kind == "selfblend")
          s = prf::self_blend(base, rng);
        else
          throw prf::ConfigError("unknown synth kind: " + kind);
        return sample_to_dict(s);
      },
      py::arg("kind"), py::arg("size") = 64, py::arg("seed") = 0,
      "One synthetic sample: dict with image, mask, label, provenance.");

  m.def(
      "perturb",
      [](const DoubleArray& image, const std::string& kind, int severity, std::uint64_t seed) {
        prf::PerturbationSpec spec;
        spec.kind = prf::perturbation_from_name(kind);
        spec.severity = severity;
        spec.seed = seed;
        return array_from(prf::perturb(image_from(image), spec).pixels);
      },
      py::arg("image"), py::arg("kind"), py::arg("severity"), py::arg("seed") = 0);

  m.def("perturbation_kinds", []() {
    std::vector<std::string> names;
    for (const prf::PerturbationKind k : prf::all_perturbations())
      names.push_back(prf::perturbation_name(k));
    return names;
  });

  m.def(
      "pixel_f1",
      [](const DoubleArray& pred, const DoubleArray& gt) {
        return prf::pixel_f1(tensor_from(pred), tensor_from(gt));
      },
      py::arg("pred"), py::arg("gt"));
  m.def(
      "mask_iou",
      [](const DoubleArray& pred, const DoubleArray& gt) {
        return prf::mask_iou(tensor_from(pred), tensor_from(gt));
      },
      py::arg("pred"), py::arg("gt"));
  m.def(
      "pixel_auc",
      [](const DoubleArray& pred, const DoubleArray& gt) -> std::optional<double> {
        return prf::pixel_auc(tensor_from(pred), tensor_from(gt));
      },
      py::arg("pred"), py::arg("gt"), "Rank AUC; None when the mask is single-class.");

  m.def(
      "train",
      [](const std::string& config_json) {
        const prf::RunConfig cfg = prf::run_config_from_json(config_json);
        const prf::TrainResult result = prf::train(cfg);
        if (!cfg.checkpoint_out.empty()) prf::save_checkpoint(result.best, cfg.checkpoint_out);
        py::dict d;
        d["steps"] = result.steps;
        d["final_loss"] = result.final_loss;
        d["best_validation_score"] = result.best_score;
        d["checkpoint"] = cfg.checkpoint_out;
        return d;
      },
      py::arg("config_json"),
      "Run the full training loop from a JSON run config string; returns a summary dict.");

  m.def(
      "infer",
      [](const std::string& checkpoint, const std::string& image_path,
         const std::string& out_dir) {
        const std::unique_ptr<prf::Pipeline> pipeline =
            prf::pipeline_from_checkpoint(prf::load_checkpoint(checkpoint));
        const prf::InferenceResult r = prf::infer(*pipeline, image_path, out_dir);
        py::dict d;
        d["label"] = r.label;
        d["p_authentic"] = r.p_authentic;
        d["p_manipulated"] = r.p_manipulated;
        d["verdict_path"] = r.verdict_path;
        d["mask_path"] = r.mask_path;
        d["probability_path"] = r.probability_path;
        return d;
      },
      py::arg("checkpoint"), py::arg("image_path"), py::arg("out_dir"));

  py::class_<PyPipeline>(m, "Pipeline")
      .def(py::init<const std::string&>(), py::arg("config_json"),
           "Fresh pipeline from a JSON run config string (the model/toggles/seed part).")
      .def_static("from_checkpoint", &PyPipeline::from_checkpoint, py::arg("path"))
      .def("predict", &PyPipeline::predict, py::arg("image"),
           "dict with logits [2] and probabilities [H,W] for an [H,W,3] image in [0,1].")
      .def("evaluate_manifest", &PyPipeline::evaluate_manifest, py::arg("manifest_path"),
           py::arg("include_authentic_pixels") = false);

  m.def(
      "save_image",
      [](const std::string& path, const DoubleArray& image) {
        prf::write_image_png(path, image_from(image));
      },
      py::arg("path"), py::arg("image"));
  m.def(
      "load_image",
      [](const std::string& path) { return array_from(prf::read_image_png(path).pixels); },
      py::arg("path"));
}
