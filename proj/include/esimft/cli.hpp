#pragma once

// Command-line front end. Exit codes: 0 success, 1 config or usage error,
// 2 missing prerequisite artifact, 3 any other runtime failure.

#include <CLI11.hpp>

#include <iostream>

#include "esimft/pipeline.hpp"

namespace esimft {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitMissing = 2;
inline constexpr int kExitRuntime = 3;

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Gear-train design generation with requirement-specialized fine-tuning and Pareto sampling"};
  app.require_subcommand(1);
  std::string config_path = "config.json";
  bool verbose = false;
  app.add_option("-c,--config", config_path, "experiment config (JSON)");
  app.add_flag("-v,--verbose", verbose, "log stage progress to stderr");
  app.fallthrough();

  auto* gen = app.add_subcommand("gen-data", "generate datasets, vocabulary and test problems");
  auto* pre = app.add_subcommand("pretrain", "train the base model");

  auto* simft = app.add_subcommand("simft", "fine-tune a requirement-specialized model");
  std::string stage, requirement;
  simft->add_option("stage", stage, "sft | dpo | ppo")->required()->check(CLI::IsMember({"sft", "dpo", "ppo"}));
  simft->add_option("--requirement", requirement, "speed | position | bbox | cost")
      ->required()
      ->check(CLI::IsMember({"speed", "position", "bbox", "cost"}));

  auto* baseline = app.add_subcommand("baseline", "build a baseline");
  std::string which;
  baseline->add_option("kind", which, "rs | ric")->required()->check(CLI::IsMember({"rs", "ric"}));

  auto* pareto = app.add_subcommand("pareto", "sample Pareto cells for one method and budget");
  std::string method;
  int budget = 0;
  pareto->add_option("--method", method, "sampling method")->required();
  pareto->add_option("--budget", budget, "samples per problem")->required()->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "aggregate cells into report.csv and SVG scatters");
  auto* all = app.add_subcommand("run-all", "run every stage in order");
  auto* schema = app.add_subcommand("schema", "print the config JSON schema");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (schema->parsed()) {
    out << config_schema().dump(2) << "\n";
    return kExitOk;
  }

  try {
    ExperimentConfig cfg = load_config(config_path);
    cfg.verbose = cfg.verbose || verbose;
    const Pipeline p(std::move(cfg));
    if (gen->parsed()) p.gen_data();
    else if (pre->parsed()) p.pretrain_stage();
    else if (simft->parsed()) p.simft_stage(parse_simft_stage(stage), parse_kind(requirement));
    else if (baseline->parsed()) which == "rs" ? p.baseline_rs() : p.baseline_ric();
    else if (pareto->parsed()) {
      const Method m = parse_method(method);
      if (std::find(p.config().methods.begin(), p.config().methods.end(), m) == p.config().methods.end())
        throw ConfigError("method " + method + " is not enabled in the config");
      p.pareto(m, budget);
    } else if (report->parsed()) p.report();
    else if (all->parsed()) p.run_all();
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const MissingArtifact& e) {
    err << e.what() << "\n";
    return kExitMissing;
  } catch (const MissingModel& e) {
    err << "missing prerequisite: " << e.what() << "\n";
    return kExitMissing;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace esimft
