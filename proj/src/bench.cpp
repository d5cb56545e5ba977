#include "plan_iv/bench.hpp"

#include "plan_iv/dataset_io.hpp"
#include "plan_iv/parallel.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

namespace plan_iv {

namespace fs = std::filesystem;

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw ConfigError(fmt::format("cannot create output directory {}", dir.string()));
  }
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError(fmt::format("cannot write {}", path.string()));
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot read {}", path.string()));
  return in;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  auto in = open_in(path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"pmse",         "param_err",     "subopt",
                                              "coverage_hit", "pessimism_hit", "j_hat",
                                              "j_star"};
  return names;
}

void write_results_csv(const std::vector<ResultRow>& rows, std::ostream& out) {
  out << kResultsHeader << '\n';
  for (const auto& r : rows) {
    out << r.app << ',' << r.K << ',' << r.seed << ',' << r.estimator << ',' << r.metric << ','
        << format_double(r.value) << ',' << format_double(r.wall_time_ms) << '\n';
  }
}

std::vector<ResultRow> read_results_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("results file is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kResultsHeader) throw ConfigError("results file has an unexpected header");
  std::vector<ResultRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 7) throw ConfigError(fmt::format("results line {}: expected 7 fields", lineno));
    try {
      ResultRow r{f[0], std::stoul(f[1]), std::stoul(f[2]), f[3], f[4], std::stod(f[5]),
                  std::stod(f[6])};
      if (std::find(metric_names().begin(), metric_names().end(), r.metric) ==
          metric_names().end()) {
        throw ConfigError(fmt::format("results line {}: unknown metric {}", lineno, r.metric));
      }
      rows.push_back(std::move(r));
    } catch (const std::invalid_argument&) {
      throw ConfigError(fmt::format("results line {}: malformed number", lineno));
    } catch (const std::out_of_range&) {
      throw ConfigError(fmt::format("results line {}: number out of range", lineno));
    }
  }
  return rows;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  ExperimentConfig c;
  c.raw = j;
  try {
    if (j.contains("app")) c.app = AppRecipe::from_json(j.at("app"));
    if (j.contains("env")) c.env = EnvRecipe::from_json(j.at("env"));
    if (c.app && c.env) throw ConfigError("config has both 'app' and 'env'");
    if (!c.app && !c.env) throw ConfigError("config needs an 'app' or an 'env' section");
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    c.record_wall_time = j.value("record_wall_time", c.record_wall_time);
    if (j.contains("dataset")) c.dataset = j.at("dataset").get<std::string>();
    if (j.contains("fits")) c.fits = j.at("fits").get<std::string>();
    if (j.contains("results")) c.results = j.at("results").get<std::string>();
    c.K = j.value("K", c.K);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad experiment config: ") + e.what());
  }
  if (c.K < 1) throw ConfigError("K must be positive");
  (void)PipelineSettings::from_json(j);  // surface malformed pipeline keys early
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  return from_json(read_json(path));
}

AppInstance env_instance(const EnvRecipe& recipe) {
  StrategicMdpSpec spec = make_confounded_linear_env(recipe);
  const std::size_t n = spec.env.action_set.size();
  std::vector<MarkovPolicy> policies;
  for (std::size_t a = 0; a < n; ++a) {
    policies.push_back(MarkovPolicy::constant(spec.env.horizon, spec.env.state_dim, n, a));
  }
  PlanningProblem problem = PlanningProblem::single(spec.env, std::move(policies));
  return AppInstance{"confounded_linear", std::move(spec), BehaviorPolicy::uniform(n),
                     std::move(problem), recipe.action_set, recipe.to_json()};
}

AppInstance ExperimentConfig::instance() const {
  if (app) return build_app(app->name, app->params);
  return env_instance(*env);
}

PipelineSettings ExperimentConfig::settings(const AppInstance& inst) const {
  PipelineSettings base = default_settings(inst);
  if (!app) {
    // a raw environment draws its initial state from a Gaussian, so evaluation is by rollout
    base.planner = PlannerMode::mc;
    base.eval.exact_h1 = false;
  }
  return PipelineSettings::from_json(raw, base);
}

std::uint64_t ExperimentConfig::master_seed() const { return app ? app->master_seed : seed; }

std::vector<std::size_t> ExperimentConfig::k_sweep() const {
  return app ? app->k_sweep : std::vector<std::size_t>{K};
}

std::size_t ExperimentConfig::n_seeds() const { return app ? app->n_seeds : 1; }

std::uint64_t run_seed(std::uint64_t master, std::size_t index) {
  return substream_seed(master, index);
}

std::uint64_t calibration_seed(std::uint64_t master, std::size_t K) {
  return substream_seed(splitmix64(master ^ 0x63616c6962726174ULL), K);
}

PipelineSettings settings_for_K(const AppInstance& app, const ExperimentConfig& cfg,
                                std::size_t K, nlohmann::json* calibration_log) {
  PipelineSettings s = cfg.settings(app);
  if (!s.calibrate) return s;
  const C0Calibration cal =
      calibrate_app(app, K, s, s.calibration_reps, calibration_seed(cfg.master_seed(), K));
  s.fit.threshold.c0 = cal.reward.c0;
  s.fit.c0_transition = cal.transition ? cal.transition->c0 : cal.reward.c0;
  if (calibration_log) {
    nlohmann::json entry = {{"K", K},
                            {"replications", cal.reward.replications},
                            {"c0_reward", cal.reward.c0},
                            {"raw_quantile_reward", cal.reward.raw_quantile}};
    if (cal.transition) {
      entry["c0_transition"] = cal.transition->c0;
      entry["raw_quantile_transition"] = cal.transition->raw_quantile;
    }
    calibration_log->push_back(entry);
  }
  return s;
}

std::vector<fs::path> cmd_gen(const ExperimentConfig& cfg) {
  const AppInstance app = cfg.instance();
  ensure_dir(cfg.out_dir);
  std::vector<fs::path> written;
  for (std::size_t K : cfg.k_sweep()) {
    for (std::size_t i = 0; i < cfg.n_seeds(); ++i) {
      const OfflineDataset data = collect_dataset(
          app.spec, app.behavior, K, substream_seed(run_seed(cfg.master_seed(), i), 0));
      const fs::path path = cfg.out_dir / fmt::format("{}_{}_{}.ndjson", app.name, K, i);
      auto out = open_out(path);
      write_ndjson(data, out);
      if (!out) throw ConfigError(fmt::format("failed writing {}", path.string()));
      written.push_back(path);
    }
  }
  return written;
}

nlohmann::json cmd_fit(const ExperimentConfig& cfg) {
  const AppInstance app = cfg.instance();
  ObservableDataset data;
  if (cfg.dataset) {
    auto in = open_in(*cfg.dataset);
    data = read_observable_ndjson(in);
    if (data.size() == 0) throw ConfigError("dataset is empty");
  } else {
    const std::size_t K = cfg.k_sweep().front();
    data = collect_dataset(app.spec, app.behavior, K,
                           substream_seed(run_seed(cfg.master_seed(), 0), 0))
               .observable();
  }
  nlohmann::json cal_log = nlohmann::json::array();
  const PipelineSettings s = settings_for_K(app, cfg, data.size(), &cal_log);

  nlohmann::json out = {{"app", app.name}, {"K", data.size()}, {"settings", s.to_json()}};
  if (!cal_log.empty()) out["calibration"] = cal_log.front();
  for (Estimator e : {Estimator::iv, Estimator::ols}) {
    FitOptions o = s.fit;
    o.estimator = e;
    out[std::string(to_string(e))] = fits_to_json(fit_all(data, app.features(), o));
  }
  nlohmann::json ols = nlohmann::json::array();
  nlohmann::json tau = nlohmann::json::array();
  for (int h = 0; h < data.horizon(); ++h) {
    std::vector<TargetTag> tags{TargetTag::reward()};
    if (!s.fit.reward_only) {
      for (Index j = 0; j < data.state_dim(); ++j) tags.push_back(TargetTag::transition(j));
    }
    for (const auto& tag : tags) {
      const StageDesign d = build_design(data, app.features(), h, tag);
      const Vec theta = naive_ols(d, s.fit.lambda >= 0.0 ? s.fit.lambda : default_ridge(d));
      ols.push_back({{"h", h},
                     {"target_tag", tag.str()},
                     {"theta", std::vector<double>(theta.begin(), theta.end())}});
    }
    const StageDesign d = build_design(data, app.features(), h, TargetTag::reward());
    try {
      tau.push_back(ill_posedness_linear(d));
    } catch (const NumericalError&) {
      tau.push_back(nullptr);
    }
  }
  out["naive_ols"] = ols;
  out["ill_posedness"] = tau;
  ensure_dir(cfg.out_dir);
  write_json(cfg.out_dir / "fits.json", out);
  return out;
}

nlohmann::json cmd_plan(const ExperimentConfig& cfg) {
  const AppInstance app = cfg.instance();
  const nlohmann::json fit_json = cfg.fits ? read_json(*cfg.fits) : cmd_fit(cfg);
  PipelineSettings s = cfg.settings(app);
  const std::string key(to_string(s.fit.estimator));
  if (!fit_json.contains(key)) throw ConfigError("fits file lacks the '" + key + "' section");
  const auto fits = fits_from_json(fit_json.at(key));
  if (static_cast<int>(fits.size()) != app.horizon()) {
    throw ConfigError("fits do not match the application's horizon");
  }
  const PlanResult r = plan_with_fits(app, fits, s, run_seed(cfg.master_seed(), 0));
  nlohmann::json out = r.to_json();
  out["app"] = app.name;
  out["estimator"] = key;
  ensure_dir(cfg.out_dir);
  write_json(cfg.out_dir / "plan.json", out);
  return out;
}

std::vector<ResultRow> bench_rows(const AppInstance& app, const RunResult& run,
                                  std::size_t seed_index, double wall_time_ms) {
  std::vector<ResultRow> rows;
  for (const auto& m : run.estimators) {
    const std::string est(to_string(m.estimator));
    const double values[] = {m.pmse,
                             m.param_err,
                             m.subopt,
                             m.coverage_hit ? 1.0 : 0.0,
                             m.pessimism_hit ? 1.0 : 0.0,
                             m.j_hat,
                             m.j_star};
    for (std::size_t k = 0; k < metric_names().size(); ++k) {
      rows.push_back({app.name, run.K, seed_index, est, metric_names()[k], values[k], wall_time_ms});
    }
  }
  return rows;
}

std::vector<ResultRow> cmd_bench(const ExperimentConfig& cfg) {
  if (!cfg.app) throw ConfigError("bench needs an 'app' section");
  const AppInstance app = cfg.instance();
  const auto ks = cfg.k_sweep();
  const std::size_t n_seeds = cfg.n_seeds();
  ensure_dir(cfg.out_dir);

  nlohmann::json cal_log = nlohmann::json::array();
  std::vector<PipelineSettings> per_k;
  for (std::size_t K : ks) per_k.push_back(settings_for_K(app, cfg, K, &cal_log));

  std::vector<std::vector<ResultRow>> cells(ks.size() * n_seeds);
  parallel_for(cells.size(), [&](std::size_t c) {
    const std::size_t ki = c / n_seeds;
    const std::size_t si = c % n_seeds;
    const auto t0 = std::chrono::steady_clock::now();
    const RunResult run = run_pipeline(app, ks[ki], run_seed(cfg.master_seed(), si), per_k[ki]);
    const double ms =
        cfg.record_wall_time
            ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                  .count()
            : 0.0;
    cells[c] = bench_rows(app, run, si, ms);
  });

  std::vector<ResultRow> rows;
  for (auto& cell : cells) {
    for (auto& r : cell) rows.push_back(std::move(r));
  }
  {
    auto out = open_out(cfg.out_dir / "results.csv");
    write_results_csv(rows, out);
    if (!out) throw ConfigError("failed writing results.csv");
  }
  write_json(cfg.out_dir / "calibration.json", cal_log);
  return rows;
}

double median(std::vector<double> values) {
  if (values.empty()) throw ConfigError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::optional<LogLogFit> loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ConfigError("slope inputs differ in length");
  std::vector<double> lx, ly;
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (x[k] > 0.0 && y[k] > 0.0 && std::isfinite(x[k]) && std::isfinite(y[k])) {
      lx.push_back(std::log(x[k]));
      ly.push_back(std::log(y[k]));
    }
  }
  const std::size_t n = lx.size();
  if (n < 2) return std::nullopt;
  double mx = 0.0, my = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    mx += lx[k];
    my += ly[k];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    sxx += (lx[k] - mx) * (lx[k] - mx);
    sxy += (lx[k] - mx) * (ly[k] - my);
  }
  if (sxx == 0.0) return std::nullopt;
  LogLogFit fit;
  fit.slope = sxy / sxx;
  fit.points = n;
  if (n > 2) {
    double rss = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double r = ly[k] - my - fit.slope * (lx[k] - mx);
      rss += r * r;
    }
    fit.standard_error = std::sqrt(rss / static_cast<double>(n - 2) / sxx);
  }
  return fit;
}

namespace {

// app → estimator → metric → K → values
using Grouped =
    std::map<std::string,
             std::map<std::string, std::map<std::string, std::map<std::size_t, std::vector<double>>>>>;

Grouped group_rows(const std::vector<ResultRow>& rows) {
  Grouped g;
  for (const auto& r : rows) g[r.app][r.estimator][r.metric][r.K].push_back(r.value);
  return g;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

nlohmann::json summarize(const std::vector<ResultRow>& rows) {
  if (rows.empty()) throw ConfigError("results contain no rows");
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [app, by_est] : group_rows(rows)) {
    for (const auto& [est, by_metric] : by_est) {
      nlohmann::json e = {{"medians", nlohmann::json::object()},
                          {"slopes", nlohmann::json::object()},
                          {"rates", nlohmann::json::object()}};
      for (const auto& [metric, by_k] : by_metric) {
        std::vector<double> ks, meds;
        nlohmann::json per_k = nlohmann::json::object();
        for (const auto& [K, values] : by_k) {
          ks.push_back(static_cast<double>(K));
          meds.push_back(median(values));
          per_k[std::to_string(K)] = meds.back();
        }
        e["medians"][metric] = per_k;
        if (metric == "subopt" || metric == "pmse") {
          const auto fit = loglog_slope(ks, meds);
          e["slopes"][metric] =
              fit ? nlohmann::json{{"slope", fit->slope},
                                   {"standard_error", fit->standard_error},
                                   {"points", fit->points}}
                  : nlohmann::json(nullptr);
        }
        if (metric == "coverage_hit" || metric == "pessimism_hit") {
          std::vector<double> all;
          nlohmann::json rate_k = nlohmann::json::object();
          for (const auto& [K, values] : by_k) {
            rate_k[std::to_string(K)] = mean(values);
            all.insert(all.end(), values.begin(), values.end());
          }
          const std::string name = metric == "coverage_hit" ? "coverage" : "pessimism_validity";
          e["rates"][name] = {{"overall", mean(all)}, {"by_K", rate_k}};
        }
      }
      out[app][est] = e;
    }
  }
  return out;
}

void write_plot_tsv(const std::vector<ResultRow>& rows, std::ostream& out) {
  out << "app\testimator\tmetric\tK\tmedian\tmean\tn\n";
  for (const auto& [app, by_est] : group_rows(rows)) {
    for (const auto& [est, by_metric] : by_est) {
      for (const auto& [metric, by_k] : by_metric) {
        for (const auto& [K, values] : by_k) {
          out << app << '\t' << est << '\t' << metric << '\t' << K << '\t'
              << format_double(median(values)) << '\t' << format_double(mean(values)) << '\t'
              << values.size() << '\n';
        }
      }
    }
  }
}

nlohmann::json cmd_report(const ExperimentConfig& cfg) {
  const fs::path path = cfg.results ? *cfg.results : cfg.out_dir / "results.csv";
  auto in = open_in(path);
  const auto rows = read_results_csv(in);
  const nlohmann::json summary = summarize(rows);
  ensure_dir(cfg.out_dir);
  write_json(cfg.out_dir / "summary.json", summary);
  auto tsv = open_out(cfg.out_dir / "plot.tsv");
  write_plot_tsv(rows, tsv);
  return summary;
}

}  // namespace plan_iv
