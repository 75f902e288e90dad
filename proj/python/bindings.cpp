#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "invflow/harness.hpp"

namespace py = pybind11;
using namespace invflow;

namespace {

py::dict sample_dict(const SampleSet& s) {
  py::dict d;
  d["names"] = s.names;
  d["values"] = s.values;
  d["method"] = s.provenance.method;
  d["seed"] = s.provenance.seed;
  d["config_hash"] = s.provenance.config_hash;
  if (s.provenance.b) d["b"] = *s.provenance.b;
  return d;
}

SampleSet sample_set(const Matrix& values) {
  SampleSet s;
  s.values = values;
  s.names = default_names(values.cols());
  return s;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Invertible-network and ensemble-MCMC posterior sampling";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  py::class_<ForwardModel>(m, "ForwardModel")
      .def_static("linear", &ForwardModel::linear, py::arg("A"), py::arg("c"))
      .def_static("synthetic_curve", py::overload_cast<>(&ForwardModel::synthetic_curve))
      .def_static("from_json", [](const std::string& s) { return forward_from_json(nlohmann::json::parse(s)); })
      .def("to_json", [](const ForwardModel& f) { return to_json(f).dump(); })
      .def_property_readonly("kind", [](const ForwardModel& f) { return to_string(f.kind()); })
      .def_property_readonly("input_dim", &ForwardModel::input_dim)
      .def_property_readonly("output_dim", &ForwardModel::output_dim)
      .def("eval", [](const ForwardModel& f, const Vector& x) { return eval_forward(f, x); }, py::arg("x"))
      .def("vjp", [](const ForwardModel& f, const Vector& x, const Vector& u) { return forward_vjp(f, x, u); },
           py::arg("x"), py::arg("upstream"));

  py::class_<PriorBox>(m, "PriorBox")
      .def(py::init([](const Vector& lo, const Vector& hi, double lambda_bd) {
             PriorBox p{lo, hi, lambda_bd};
             p.validate();
             return p;
           }),
           py::arg("lo"), py::arg("hi"), py::arg("lambda_bd") = 10.0)
      .def_static("grating", &PriorBox::grating, py::arg("lambda_bd") = 10.0)
      .def_readonly("lo", &PriorBox::lo)
      .def_readonly("hi", &PriorBox::hi)
      .def_readonly("lambda_bd", &PriorBox::lambda_bd)
      .def("contains", &PriorBox::contains);

  py::class_<Measurement>(m, "Measurement")
      .def(py::init([](const Vector& y, const Vector& w) {
             Measurement meas{y, w, {}, {}};
             meas.validate();
             return meas;
           }),
           py::arg("y"), py::arg("w"))
      .def_readonly("y", &Measurement::y)
      .def_readonly("w", &Measurement::w)
      .def_readonly("b_true", &Measurement::b_true)
      .def_readonly("x_true", &Measurement::x_true);

  m.def(
      "synthesize_measurement",
      [](const ForwardModel& f, const Vector& x_true, double b, std::uint64_t seed) {
        Rng rng(seed);
        return synthesize_measurement(f, x_true, b, rng);
      },
      py::arg("forward"), py::arg("x_true"), py::arg("b"), py::arg("seed") = 0);

  m.def(
      "log_likelihood",
      [](double b, const Vector& w, const Vector& fy, const Vector& y) {
        return log_likelihood(NoiseModel{b, w}, fy, y);
      },
      py::arg("b"), py::arg("w"), py::arg("forward_y"), py::arg("y"));
  m.def("boundary_loss", &boundary_loss, py::arg("prior"), py::arg("x"), py::arg("smooth_beta") = 0.0);

  py::class_<FlowModel>(m, "FlowModel")
      .def_readonly("dim", &FlowModel::dim)
      .def_readonly("clamp", &FlowModel::clamp)
      .def_property_readonly("num_blocks", [](const FlowModel& f) { return f.blocks.size(); })
      .def("forward",
           [](const FlowModel& f, const Matrix& xi) {
             auto e = flow_apply(f, Matrix(xi.transpose()));
             return py::make_tuple(Matrix(e.output.transpose()), e.log_det);
           },
           py::arg("xi"), "Rows of xi are points; returns (T(xi), log_det).")
      .def(
          "inverse",
          [](const FlowModel& f, const Matrix& x) { return Matrix(flow_inverse(f, Matrix(x.transpose())).transpose()); },
          py::arg("x"))
      .def("to_json", [](const FlowModel& f) { return to_json(f).dump(); })
      .def_static("from_json", [](const std::string& s) { return flow_from_json(nlohmann::json::parse(s)); });

  m.def(
      "build_flow",
      [](int dim, int blocks, int width, int depth, double clamp, std::uint64_t seed) {
        Rng rng(seed);
        return build_flow(FlowShape{dim, blocks, width, depth, clamp}, rng);
      },
      py::arg("dim"), py::arg("blocks") = 10, py::arg("subnet_width") = 256, py::arg("subnet_depth") = 2,
      py::arg("clamp") = 2.0, py::arg("seed") = 0);

  m.def(
      "train_inn_and_sample",
      [](FlowModel flow, const ForwardModel& f, const Measurement& meas, double b, const PriorBox& prior,
         const std::string& train_json, int count, std::uint64_t seed) {
        const TrainConfig cfg = train_config_from_json(nlohmann::json::parse(train_json));
        TrainedInn trained;
        {
          py::gil_scoped_release release;
          trained = train_inn(std::move(flow), f, meas, NoiseModel{b, meas.w}, prior, cfg);
        }
        std::vector<double> losses;
        for (const auto& e : trained.trace) losses.push_back(e.loss);
        py::dict out = sample_dict(sample_posterior_inn(trained, count, seed));
        out["losses"] = losses;
        out["diverged"] = trained.diverged;
        out["flow"] = trained.flow;
        return out;
      },
      py::arg("flow"), py::arg("forward"), py::arg("measurement"), py::arg("b"), py::arg("prior"),
      py::arg("train_config") = "{}", py::arg("count") = 20000, py::arg("seed") = 0);

  m.def(
      "run_sampler",
      [](const ForwardModel& f, const Measurement& meas, const PriorBox& prior, std::optional<double> b,
         int walkers, int steps, int burn_in, double a, std::uint64_t seed) {
        const TargetDensity target = b ? make_posterior_target(f, meas, NoiseModel{*b, meas.w}, prior)
                                       : make_augmented_target(f, meas, prior, 1e-3, 0.3);
        SamplerConfig cfg{walkers, steps, burn_in, 1, a, seed};
        SamplerRun run;
        {
          py::gil_scoped_release release;
          run = run_sampler(target, prior, cfg);
        }
        py::dict out = sample_dict(run.samples);
        out["acceptance_rate"] = run.acceptance_rate;
        out["walkers"] = run.walkers;
        return out;
      },
      py::arg("forward"), py::arg("measurement"), py::arg("prior"), py::arg("b") = std::nullopt,
      py::arg("walkers") = 32, py::arg("steps") = 10000, py::arg("burn_in") = 2000, py::arg("a") = 2.0,
      py::arg("seed") = 0,
      "Fixed-noise posterior when b is given, otherwise the joint posterior over (x, b).");

  m.def("ks_two_sample", &ks_two_sample, py::arg("a"), py::arg("b"));
  m.def("ks_standard_normal", &ks_standard_normal, py::arg("a"));

  m.def(
      "compare",
      [](const Matrix& a, const Matrix& b) { return to_json(compare(sample_set(a), sample_set(b))).dump(); },
      py::arg("a"), py::arg("b"), "Comparison report of two draw matrices (rows = draws) as a JSON string.");

  m.def(
      "iact",
      [](const Matrix& chain) { return diagnostics({chain}).iact; }, py::arg("chain"),
      "Integrated autocorrelation time per column of a single chain.");

  m.def(
      "run_experiment",
      [](const std::string& config_json, const std::string& out_dir) {
        const auto cfg = config_from_json(nlohmann::json::parse(config_json));
        StudyResult study;
        {
          py::gil_scoped_release release;
          study = run_experiment(cfg, out_dir);
        }
        py::list reports;
        for (const auto& r : study.runs) reports.append(to_json(r.report).dump());
        return py::make_tuple(study.config_hash, reports);
      },
      py::arg("config_json"), py::arg("out_dir") = "");
}
