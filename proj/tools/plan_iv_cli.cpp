#include "plan_iv/bench.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <fmt/format.h>

#include <cstdio>
#include <string>

namespace {

constexpr int kConfigExit = 2;
constexpr int kNumericalExit = 3;

int run(const std::string& command, const std::string& config_path, const std::string& out) {
  plan_iv::ExperimentConfig cfg = plan_iv::ExperimentConfig::load(config_path);
  if (!out.empty()) cfg.out_dir = out;

  if (command == "gen") {
    for (const auto& p : plan_iv::cmd_gen(cfg)) fmt::print("{}\n", p.string());
  } else if (command == "fit") {
    plan_iv::cmd_fit(cfg);
    fmt::print("{}\n", (cfg.out_dir / "fits.json").string());
  } else if (command == "plan") {
    const auto result = plan_iv::cmd_plan(cfg);
    fmt::print("{}\npolicy {} value {}\n", (cfg.out_dir / "plan.json").string(),
               result.at("policy_label").get<std::string>(), result.at("value").dump());
  } else if (command == "bench") {
    const auto rows = plan_iv::cmd_bench(cfg);
    fmt::print("{}\n{} rows\n", (cfg.out_dir / "results.csv").string(), rows.size());
  } else if (command == "report") {
    plan_iv::cmd_report(cfg);
    fmt::print("{}\n{}\n", (cfg.out_dir / "summary.json").string(),
               (cfg.out_dir / "plot.tsv").string());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pessimistic planning with instrumental-variable model estimation"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::string out;
  for (const char* name : {"gen", "fit", "plan", "bench", "report"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "experiment JSON")->required();
    sub->add_option("--out", out, "output directory (overrides out_dir)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, config_path, out);
  } catch (const plan_iv::ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return kConfigExit;
  } catch (const nlohmann::json::exception& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return kConfigExit;
  } catch (const plan_iv::NumericalError& e) {
    fmt::print(stderr, "numerical failure: {}\n", e.what());
    return kNumericalExit;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
}
