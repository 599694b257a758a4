#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "prefixq/errors.hpp"
#include "prefixq/harness.hpp"
#include "prefixq/quotientlab.hpp"

namespace py = pybind11;
using namespace prefixq;

namespace {

py::dict metrics_dict(const EvalMetrics& m) {
  py::dict d;
  d["success_rate"] = m.success_rate;
  d["mean_error"] = m.mean_error;
  d["endpoint_error"] = m.endpoint_error;
  d["episodes"] = m.episodes;
  return d;
}

py::dict row_dict(const MetricsRow& r) {
  py::dict d;
  d["step"] = r.step;
  d["loss"] = r.loss;
  d["flow_loss"] = r.flow_loss;
  d["tc_loss"] = r.tc_loss;
  d["gate"] = r.gate;
  d["lr"] = r.lr;
  d["grad_norm"] = r.grad_norm;
  d["grad_norm_clipped"] = r.grad_norm_clipped;
  d["success_train"] = r.success_train;
  d["success_shift"] = r.success_shift;
  return d;
}

TrainConfig config_from(const std::string& json_text, const std::vector<std::string>& overrides) {
  TrainConfig cfg = json_text.empty() ? TrainConfig::preset_named("desk") : config_from_json_text(json_text);
  cfg = apply_overrides(cfg, overrides);
  cfg.validate();
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the prefixq C++ library";

  static py::exception<Error> error(m, "Error", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object err = py::reinterpret_borrow<py::object>(error.ptr())(e.what());
      err.attr("kind") = e.kind();
      PyErr_SetObject(error.ptr(), err.ptr());
    }
  });

  // quantizer
  m.def("quantize", [](const Eigen::RowVectorXd& z, int bits) {
    QuantConfig q;
    q.bits = bits;
    q.validate();
    return Eigen::RowVectorXd(quantize(z, q));
  }, py::arg("z"), py::arg("bits") = 8);
  m.def("quantization_step", [](const Eigen::RowVectorXd& z, int bits) {
    QuantConfig q;
    q.bits = bits;
    q.validate();
    return quantization_step(z, q);
  }, py::arg("z"), py::arg("bits") = 8);
  m.def("quantize_rows", [](const Matrix& tokens, int bits) {
    QuantConfig q;
    q.bits = bits;
    q.validate();
    return quantize_rows(tokens, q);
  }, py::arg("tokens"), py::arg("bits") = 8);

  // objective
  m.def("temporal_complexity", [](const Matrix& v, double lambda1, double lambda2) {
    TCWeights w;
    w.lambda1 = lambda1;
    w.lambda2 = lambda2;
    w.validate();
    return temporal_complexity(v, w);
  }, py::arg("v"), py::arg("lambda1") = 1.0, py::arg("lambda2") = 1.0);
  m.def("tc_hinge", py::overload_cast<double, double>(&tc_hinge), py::arg("c_quantized"), py::arg("c_raw"));
  m.def("integrate_flow", [](const std::function<Matrix(const Matrix&, double)>& field, const Matrix& epsilon,
                             int n_steps) { return integrate_flow(field, epsilon, n_steps); },
        py::arg("field"), py::arg("epsilon"), py::arg("n_steps"));

  // quotient
  m.def("summarize_quotient", [](const std::string& world_json, double tol) {
    const quotient::QuotientSummary s = quotient::summarize_quotient(quotient::world_from_json_text(world_json), tol);
    py::dict d;
    d["latents"] = s.n_latents;
    d["classes"] = s.n_classes;
    d["sufficient"] = s.sufficient;
    d["minimal"] = s.minimal;
    d["round_trip"] = s.round_trip;
    d["partition"] = s.partition;
    return d;
  }, py::arg("world_json"), py::arg("tol") = quotient::kDefaultTolerance);
  m.def("estimate_action_complexity",
        [](const std::vector<std::vector<Matrix>>& outputs, std::size_t n_draws, std::uint64_t seed) {
          quotient::FunctionClass fc{outputs};
          const auto est = quotient::estimate_action_complexity(fc, n_draws, seed);
          return py::make_tuple(est.estimate, est.per_draw);
        },
        py::arg("outputs"), py::arg("n_draws"), py::arg("seed") = 0);

  // config
  m.def("preset_config", [](const std::string& name) { return config_to_json_text(TrainConfig::preset_named(name)); },
        py::arg("name") = "desk");
  m.def("apply_overrides", [](const std::string& json_text, const std::vector<std::string>& overrides) {
    return config_to_json_text(config_from(json_text, overrides));
  }, py::arg("config_json"), py::arg("overrides"));

  // data
  py::class_<synth::Episode>(m, "Episode")
      .def_readonly("task", &synth::Episode::task)
      .def_readonly("nuisance", &synth::Episode::nuisance)
      .def_readonly("prefix", &synth::Episode::prefix)
      .def_readonly("expert", &synth::Episode::expert);
  py::class_<synth::Dataset>(m, "Dataset")
      .def_readonly("train", &synth::Dataset::train)
      .def_readonly("test", &synth::Dataset::test)
      .def_readonly("train_nuisances", &synth::Dataset::train_nuisances)
      .def_readonly("test_nuisances", &synth::Dataset::test_nuisances)
      .def("save", [](const synth::Dataset& d, const std::string& path) { synth::save_dataset(d, path); })
      .def_static("load", &synth::load_dataset);
  m.def("generate_dataset", [](const std::string& json_text, const std::vector<std::string>& overrides) {
    return synth::generate_dataset(config_from(json_text, overrides).task);
  }, py::arg("config_json") = "", py::arg("overrides") = std::vector<std::string>{});

  // training
  py::class_<Checkpoint>(m, "Checkpoint")
      .def_readonly("step", &Checkpoint::step)
      .def_property_readonly("config_json", [](const Checkpoint& c) { return config_to_json_text(c.config); })
      .def_property_readonly("params", [](const Checkpoint& c) {
        py::dict d;
        for (const auto& [name, value] : c.params) d[py::str(name)] = value;
        return d;
      })
      .def("save", [](const Checkpoint& c, const std::string& path) { save_checkpoint(c, path); })
      .def_static("load", &load_checkpoint);

  m.def("train", [](const std::string& json_text, const std::vector<std::string>& overrides,
                    const synth::Dataset* data, const Checkpoint* resume) {
    const TrainConfig cfg = config_from(json_text, overrides);
    const synth::Dataset generated = data ? synth::Dataset{} : synth::generate_dataset(cfg.task);
    TrainOptions opts;
    opts.resume = resume;
    TrainResult result;
    {
      py::gil_scoped_release release;
      result = train(cfg, data ? *data : generated, opts);
    }
    py::list rows;
    for (const MetricsRow& r : result.metrics) rows.append(row_dict(r));
    return py::make_tuple(result.checkpoint, rows);
  }, py::arg("config_json") = "", py::arg("overrides") = std::vector<std::string>{}, py::arg("data") = nullptr,
        py::arg("resume") = nullptr);

  m.def("evaluate", [](const Checkpoint& ckpt, const synth::Dataset& data, const std::string& shift) {
    EvalMetrics m;
    {
      py::gil_scoped_release release;
      m = evaluate(ckpt, data, Shift::parse(shift));
    }
    return metrics_dict(m);
  }, py::arg("checkpoint"), py::arg("data"), py::arg("shift") = "clean");

  m.def("ablation_knobs", &ablation_knobs);
}
