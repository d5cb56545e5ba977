#include "plan_iv/bench.hpp"
#include "plan_iv/dataset_io.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

namespace py = pybind11;
using namespace plan_iv;

namespace {

// JSON crosses the boundary as text; the Python package wraps these with json.loads/dumps.
using Text = std::string;

nlohmann::json parse(const Text& s) { return s.empty() ? nlohmann::json::object() : nlohmann::json::parse(s); }

StageDesign design(const Mat& X, const Mat& Z, const Vec& y) {
  StageDesign d;
  d.X = X;
  d.Z = Z;
  d.y = y;
  return d;
}

py::dict fit_dict(const TwoSlsFit& f) {
  py::dict d;
  d["theta_hat"] = f.theta_hat;
  d["A"] = f.A;
  d["loss_at_min"] = f.loss_at_min;
  d["lambda"] = f.lambda;
  d["rank"] = f.rank;
  return d;
}

}  // namespace

PYBIND11_MODULE(_plan_iv, m) {
  m.doc() = "IV estimation and pessimistic planning for strategic MDPs";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<nlohmann::json::exception>(m, "JsonError", PyExc_ValueError);

  m.def("minimax_loss_linear",
        [](const Mat& X, const Mat& Z, const Vec& y, const Vec& theta, double lam) {
          return minimax_loss_linear(design(X, Z, y), theta, lam);
        },
        py::arg("X"), py::arg("Z"), py::arg("y"), py::arg("theta"), py::arg("lam") = 0.0);
  m.def("fit_2sls",
        [](const Mat& X, const Mat& Z, const Vec& y, double lam) {
          return fit_dict(fit_2sls(design(X, Z, y), lam));
        },
        py::arg("X"), py::arg("Z"), py::arg("y"), py::arg("lam") = 0.0);
  m.def("naive_ols",
        [](const Mat& X, const Vec& y, double lam) { return naive_ols(design(X, X, y), lam); },
        py::arg("X"), py::arg("y"), py::arg("lam") = 0.0);
  m.def("projected_mse",
        [](const Mat& X, const Mat& Z, const Vec& theta, const Vec& ref) {
          return projected_mse(design(X, Z, Vec::Zero(X.rows())), theta, ref);
        },
        py::arg("X"), py::arg("Z"), py::arg("theta"), py::arg("reference"));
  m.def("threshold_linear",
        [](const Text& cfg, double x) { return threshold_linear(ThresholdConfig::from_json(parse(cfg)), x); },
        py::arg("config"), py::arg("x") = 1.0);
  m.def("kernel_iv_fitted",
        [](const Mat& X, const Mat& Z, const Vec& y, const std::string& kx, double bx,
           const std::string& kz, double bz, double lam) {
          return fit_kernel_iv(design(X, Z, y), {kx, bx}, {kz, bz}, lam).fitted();
        },
        py::arg("X"), py::arg("Z"), py::arg("y"), py::arg("kernel_x") = "rbf",
        py::arg("bandwidth_x") = 1.0, py::arg("kernel_z") = "rbf", py::arg("bandwidth_z") = 1.0,
        py::arg("lam") = 1e-3);
  m.def("lcb",
        [](const Vec& center, const Mat& A, double c2, const Vec& mu, double offset) {
          const LcbValue v = lcb(ConfidenceEllipsoid(center, A, c2), LinearValue{mu, offset});
          return py::make_tuple(v.value, v.unidentified_direction);
        },
        py::arg("center"), py::arg("A"), py::arg("c2"), py::arg("mu"), py::arg("offset") = 0.0);

  m.def("app_names", [] {
    std::vector<std::string> names;
    for (const auto& [name, _] : app_registry()) names.push_back(name);
    return names;
  });
  m.def("collect_ndjson",
        [](const std::string& app, const Text& params, std::size_t K, std::uint64_t seed) {
          const AppInstance inst = build_app(app, parse(params));
          std::ostringstream os;
          write_ndjson(collect_dataset(inst.spec, inst.behavior, K, seed), os);
          return os.str();
        },
        py::arg("app"), py::arg("params"), py::arg("K"), py::arg("seed"));
  m.def("run_pipeline",
        [](const std::string& app, const Text& params, std::size_t K, std::uint64_t seed,
           const Text& settings) {
          const AppInstance inst = build_app(app, parse(params));
          const PipelineSettings s = PipelineSettings::from_json(parse(settings), default_settings(inst));
          RunResult run;
          {
            py::gil_scoped_release release;
            run = run_pipeline(inst, K, seed, s);
          }
          nlohmann::json out = nlohmann::json::object();
          for (const auto& e : run.estimators) {
            out[std::string(to_string(e.estimator))] = {
                {"pmse", e.pmse},         {"param_err", e.param_err},
                {"subopt", e.subopt},     {"coverage_hit", e.coverage_hit},
                {"pessimism_hit", e.pessimism_hit}, {"j_hat", e.j_hat},
                {"j_star", e.j_star},     {"plan", e.plan.to_json()}};
          }
          return out.dump();
        },
        py::arg("app"), py::arg("params"), py::arg("K"), py::arg("seed"), py::arg("settings"));

  m.def("cmd_fit", [](const Text& cfg) { return cmd_fit(ExperimentConfig::from_json(parse(cfg))).dump(); });
  m.def("cmd_plan", [](const Text& cfg) { return cmd_plan(ExperimentConfig::from_json(parse(cfg))).dump(); });
  m.def("cmd_report", [](const Text& cfg) { return cmd_report(ExperimentConfig::from_json(parse(cfg))).dump(); });
  m.def("cmd_bench", [](const Text& cfg) {
    const ExperimentConfig c = ExperimentConfig::from_json(parse(cfg));
    py::gil_scoped_release release;
    return cmd_bench(c).size();
  });
  m.def("cmd_gen", [](const Text& cfg) {
    std::vector<std::string> out;
    for (const auto& p : cmd_gen(ExperimentConfig::from_json(parse(cfg)))) out.push_back(p.string());
    return out;
  });
  m.attr("RESULTS_HEADER") = kResultsHeader;
}
