#pragma once

// Experiment orchestration behind the `plan-iv` command line: dataset generation, fitting,
// planning, K-sweeps and the summary report.

#include "plan_iv/applications.hpp"

#include "json.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace plan_iv {

inline constexpr const char* kResultsHeader = "app,K,seed,estimator,metric,value,wall_time_ms";

/// Metric names allowed in results.csv, in emission order.
const std::vector<std::string>& metric_names();

struct ResultRow {
  std::string app;
  std::size_t K = 0;
  std::size_t seed = 0;  // seed index within the sweep
  std::string estimator;
  std::string metric;
  double value = 0.0;
  double wall_time_ms = 0.0;
};

void write_results_csv(const std::vector<ResultRow>& rows, std::ostream& out);
std::vector<ResultRow> read_results_csv(std::istream& in);

/// Top-level experiment file. Either `app` (an AppRecipe) or `env` (a raw confounded
/// linear environment) must be present; pipeline knobs sit at the top level.
struct ExperimentConfig {
  std::optional<AppRecipe> app;
  std::optional<EnvRecipe> env;
  nlohmann::json raw;  // the whole file, read again for pipeline settings
  std::filesystem::path out_dir = "out";
  bool record_wall_time = false;
  std::optional<std::filesystem::path> dataset;
  std::optional<std::filesystem::path> fits;
  std::optional<std::filesystem::path> results;
  /// Sample size and master seed for a raw environment.
  std::size_t K = 1000;
  std::uint64_t seed = 0;

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);

  /// The app (or a wrapper around the raw environment with constant policies).
  AppInstance instance() const;
  /// App defaults overlaid with the file's pipeline keys.
  PipelineSettings settings(const AppInstance& app) const;
  std::uint64_t master_seed() const;
  std::vector<std::size_t> k_sweep() const;
  std::size_t n_seeds() const;
};

/// Wraps a raw environment recipe: uniform behavior, constant policies over its actions.
AppInstance env_instance(const EnvRecipe& recipe);

/// Per-run seed for sweep index i.
std::uint64_t run_seed(std::uint64_t master, std::size_t index);
/// Seed of the calibration replications for sample size K.
std::uint64_t calibration_seed(std::uint64_t master, std::size_t K);

/// Settings with c0 replaced by the calibrated values when calibration is on.
PipelineSettings settings_for_K(const AppInstance& app, const ExperimentConfig& cfg,
                                std::size_t K, nlohmann::json* calibration_log = nullptr);

/// Writes `{app}_{K}_{seed}.ndjson` for every sweep cell; returns the written paths.
std::vector<std::filesystem::path> cmd_gen(const ExperimentConfig& cfg);
/// Fits IV and OLS; returns the JSON written to `fits.json`.
nlohmann::json cmd_fit(const ExperimentConfig& cfg);
/// Plans on the fits from `cmd_fit`; returns the PlanResult JSON written to `plan.json`.
nlohmann::json cmd_plan(const ExperimentConfig& cfg);
/// Full sweep; returns the rows written to `results.csv`.
std::vector<ResultRow> cmd_bench(const ExperimentConfig& cfg);
/// Summary of a results file; writes `summary.json` and `plot.tsv`.
nlohmann::json cmd_report(const ExperimentConfig& cfg);

std::vector<ResultRow> bench_rows(const AppInstance& app, const RunResult& run,
                                  std::size_t seed_index, double wall_time_ms);

struct LogLogFit {
  double slope = 0.0;
  double standard_error = 0.0;
  std::size_t points = 0;
};

/// OLS fit of ln y on ln x over the points with x, y > 0.
std::optional<LogLogFit> loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

double median(std::vector<double> values);

nlohmann::json summarize(const std::vector<ResultRow>& rows);
/// Tab-separated per-(app, estimator, metric, K) medians.
void write_plot_tsv(const std::vector<ResultRow>& rows, std::ostream& out);

}  // namespace plan_iv
