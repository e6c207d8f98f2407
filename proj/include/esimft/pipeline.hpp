#pragma once

// Stage orchestration over an output directory: data generation, pre-training,
// SimFT stages, baselines, Pareto cells and the report.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "esimft/baselines.hpp"
#include "esimft/checkpoint.hpp"
#include "esimft/config.hpp"
#include "esimft/dataset_gen.hpp"
#include "esimft/finetune.hpp"
#include "esimft/pareto_eval.hpp"

namespace esimft {

enum class SimftStage : std::uint8_t { sft, dpo, ppo };

inline std::string_view simft_stage_name(SimftStage s) {
  switch (s) {
    case SimftStage::sft: return "sft";
    case SimftStage::dpo: return "dpo";
    case SimftStage::ppo: return "ppo";
  }
  return "?";
}

inline SimftStage parse_simft_stage(std::string_view s) {
  if (s == "sft") return SimftStage::sft;
  if (s == "dpo") return SimftStage::dpo;
  if (s == "ppo") return SimftStage::ppo;
  throw std::invalid_argument("unknown SimFT stage: " + std::string(s));
}

// ---------------------------------------------------------------------------
// Artifact layout

struct ArtifactPaths {
  fs::path root;

  fs::path config() const { return root / "config.json"; }
  fs::path vocab() const { return root / "vocab.json"; }
  fs::path pretrain_data() const { return root / "data" / "pretrain.jsonl"; }
  fs::path finetune_pool() const { return root / "data" / "finetune_pool.jsonl"; }
  fs::path test_problems() const { return root / "data" / "test_problems.json"; }
  fs::path probe_problems() const { return root / "data" / "probe_problems.json"; }
  fs::path stage_data(SimftStage s, RequirementKind k) const {
    const std::string stem = std::string(simft_stage_name(s)) + "_" + std::string(kind_name(k));
    return root / "data" / (stem + (s == SimftStage::ppo ? "_problems.json" : ".jsonl"));
  }
  fs::path ric_data() const { return root / "data" / "ric.jsonl"; }
  fs::path pretrained() const { return root / "models" / "pretrained.ckpt"; }
  fs::path simft_model(SimftStage s, RequirementKind k) const {
    return root / "models" / (std::string(simft_stage_name(s)) + "_" + std::string(kind_name(k)) + ".ckpt");
  }
  fs::path epoch_model(SimftStage s, RequirementKind k, int epoch) const {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%02d.ckpt", epoch);
    return root / "models" / (std::string(simft_stage_name(s)) + "_" + std::string(kind_name(k))) / name;
  }
  fs::path selection(SimftStage s, RequirementKind k) const {
    return root / "models" / (std::string(simft_stage_name(s)) + "_" + std::string(kind_name(k)) + ".selection.json");
  }
  fs::path ric_model() const { return root / "models" / "ric.ckpt"; }
  fs::path rs_index() const { return root / "models" / "rs_index.json"; }
  fs::path history(const std::string& stem) const { return root / "histories" / (stem + ".csv"); }
  fs::path cell(int budget, Method m, const Scenario& sc, int problem) const {
    char name[32];
    std::snprintf(name, sizeof name, "problem_%02d.json", problem);
    return root / "cells" / ("N" + std::to_string(budget)) / std::string(method_name(m)) / sc.name() / name;
  }
  fs::path report() const { return root / "report.csv"; }
  fs::path svg(const Scenario& sc) const { return root / ("pareto_" + sc.name() + ".svg"); }
};

// ---------------------------------------------------------------------------
// Shared helpers

inline std::uint64_t sub_seed(std::uint64_t seed, std::string_view tag) {
  Rng rng = derive_rng(seed, {stream_tag(tag)});
  return rng();
}

/// Linear interpolation between order statistics (0 <= q <= 100).
inline double percentile(std::vector<double> xs, double q) {
  if (xs.empty()) throw std::invalid_argument("percentile of an empty sample");
  if (!(q >= 0 && q <= 100)) throw std::invalid_argument("percentile must be in [0, 100]");
  std::sort(xs.begin(), xs.end());
  const double pos = q / 100.0 * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

struct BoundLevels {
  double bbox = 0;
  double cost = 0;
};

inline BoundLevels bound_levels(const std::vector<LabeledExample>& pretrain, double q) {
  std::vector<double> bbox, cost;
  for (const auto& e : pretrain) {
    if (!e.metrics.valid) continue;
    bbox.push_back(e.metrics.bbox_volume);
    cost.push_back(e.metrics.cost);
  }
  return {percentile(bbox, q), percentile(cost, q)};
}

/// Targets from freshly generated designs; bbox and cost bounds at the given
/// percentile of the pre-training metric distribution.
inline std::vector<Problem> make_test_problems(int n, std::uint64_t seed, const std::vector<LabeledExample>& pretrain,
                                               double bound_percentile, const GearCatalog& catalog,
                                               int max_stages = kMaxStages) {
  const BoundLevels b = bound_levels(pretrain, bound_percentile);
  std::vector<Problem> out;
  for (int i = 0; i < n; ++i) {
    Rng rng = derive_rng(seed, {stream_tag("test-problems"), static_cast<std::uint64_t>(i)});
    Problem p = problem_from_metrics(simulate(random_design(rng, max_stages), catalog));
    p.bbox_bound = b.bbox;
    p.cost_bound = b.cost;
    out.push_back(p);
  }
  return out;
}

inline json problems_to_json(const std::vector<Problem>& ps) {
  json a = json::array();
  for (const auto& p : ps) a.push_back(problem_to_json(p));
  return a;
}

inline std::vector<Problem> problems_from_json(const json& j) {
  std::vector<Problem> ps;
  for (const auto& p : j) ps.push_back(problem_from_json(p));
  return ps;
}

inline json vocab_json() {
  json tokens = json::array();
  for (int id = 0; id < kNumTokenIds; ++id) tokens.push_back({{"id", id}, {"name", token_name(*Token::from_id(id))}});
  return {{"tokens", tokens}, {"pad_id", kPadId}, {"output_classes", kNumOutputTokens}, {"max_length", kMaxSequenceLength}};
}

inline Model load_model(const fs::path& p) {
  require_file(p);
  return Model(load_checkpoint<float>(p));
}

inline std::vector<Problem> with_only_bound(std::vector<Problem> ps, RequirementKind k) {
  for (auto& p : ps) {
    const auto b = p.bound(k);
    p.bbox_bound.reset();
    p.cost_bound.reset();
    if (b) p.set_bound(k, *b);
  }
  return ps;
}

// ---------------------------------------------------------------------------
// Requirement studies on held-out problems

/// Per-problem mean raw violation over the valid ones of `samples` draws (NaN
/// when none is valid).
template <class T>
std::vector<double> per_problem_violation(const ConditionalSequenceModel<T>& model, const std::vector<Problem>& problems,
                                          RequirementKind kind,
                                          const std::function<Conditioning(const Problem&)>& conditioning, int samples,
                                          std::uint64_t seed, const GearCatalog& catalog, const ViolationScales& scales = {},
                                          const SamplingConfig& sampling = {}) {
  std::vector<double> out;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    const Conditioning c = conditioning(problems[i]);
    double total = 0;
    int valid = 0;
    for (int s = 0; s < samples; ++s) {
      Rng rng = derive_rng(seed, {stream_tag("study"), static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(s)});
      const SimulationResult r = simulate(sample(model, c, sampling, rng), catalog);
      if (!r.valid) continue;
      total += violation(r, requirement_for(problems[i], kind, scales));
      ++valid;
    }
    out.push_back(valid ? total / valid : std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

struct MetStudy {
  double percent_met = 0;
  double validity = 0;
  int samples = 0;
};

/// Percentage of draws meeting requirement `kind` (invalid draws count as not met).
template <class T>
MetStudy percent_met(const ConditionalSequenceModel<T>& model, const std::vector<Problem>& problems, RequirementKind kind,
                     const std::function<Conditioning(const Problem&)>& conditioning, int samples, std::uint64_t seed,
                     const GearCatalog& catalog, const Tolerances& tol = {}, const ViolationScales& scales = {},
                     const SamplingConfig& sampling = {}) {
  int met = 0, valid = 0, total = 0;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    const Conditioning c = conditioning(problems[i]);
    for (int s = 0; s < samples; ++s) {
      Rng rng = derive_rng(seed, {stream_tag("study"), static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(s)});
      const SimulationResult r = simulate(sample(model, c, sampling, rng), catalog);
      ++total;
      valid += r.valid ? 1 : 0;
      met += meets(r, problems[i], kind, tol, scales) ? 1 : 0;
    }
  }
  return {total ? 100.0 * met / total : 0.0, total ? static_cast<double>(valid) / total : 0.0, total};
}

struct SignTest {
  int improved = 0;
  int worsened = 0;
  int ties = 0;
  double p_value = 1.0;
};

/// One-sided exact sign test of `after < before`; ties and NaN pairs are dropped.
inline SignTest sign_test_improvement(const std::vector<double>& before, const std::vector<double>& after) {
  if (before.size() != after.size()) throw std::invalid_argument("sign test needs paired samples");
  SignTest t;
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (std::isnan(before[i]) || std::isnan(after[i])) continue;
    if (after[i] < before[i]) ++t.improved;
    else if (after[i] > before[i]) ++t.worsened;
    else ++t.ties;
  }
  const int n = t.improved + t.worsened;
  double p = 0;
  for (int k = t.improved; k <= n; ++k)
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  t.p_value = n == 0 ? 1.0 : std::min(1.0, p);
  return t;
}

// ---------------------------------------------------------------------------
// Pipeline

class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig cfg) : cfg_(std::move(cfg)), paths_{cfg_.out()} {}

  const ExperimentConfig& config() const { return cfg_; }
  const ArtifactPaths& paths() const { return paths_; }

  // gen-data ---------------------------------------------------------------

  void gen_data() const {
    write_config();
    write_json(paths_.vocab(), vocab_json());
    const auto pre = generate_pretrain_dataset(cfg_.pretrain_size, sub_seed(cfg_.seed, "pretrain-data"), cfg_.catalog);
    save_examples(paths_.pretrain_data(), pre);
    const auto pool = generate_pretrain_dataset(cfg_.finetune_size, sub_seed(cfg_.seed, "finetune-pool"), cfg_.catalog);
    save_examples(paths_.finetune_pool(), pool);
    const auto tests = make_test_problems(cfg_.test_problems, sub_seed(cfg_.seed, "test-problems"), pre,
                                          cfg_.bound_percentile, cfg_.catalog, cfg_.max_stages);
    write_json(paths_.test_problems(), problems_to_json(tests));
    // Probe problems come from the pool's held-out test split with the same bound levels.
    const BoundLevels b = bound_levels(pre, cfg_.bound_percentile);
    std::vector<Problem> probe = problems_of(splits().test);
    if (probe.size() > static_cast<std::size_t>(cfg_.probe_problems)) probe.resize(static_cast<std::size_t>(cfg_.probe_problems));
    for (auto& p : probe) {
      p.bbox_bound = b.bbox;
      p.cost_bound = b.cost;
    }
    write_json(paths_.probe_problems(), problems_to_json(probe));
    log("gen-data", "wrote " + std::to_string(pre.size()) + " pre-training and " + std::to_string(pool.size()) +
                        " fine-tuning examples");
  }

  // pretrain ---------------------------------------------------------------

  TrainingResult<float> pretrain_stage() const {
    write_config();
    auto data = load_examples(paths_.pretrain_data(), cfg_.catalog);
    const auto probe_set = load_problems(paths_.probe_problems());
    const auto split = train_val_split(data);
    data.clear();
    TrainingConfig tc = cfg_.training.pretrain;
    tc.seed = sub_seed(cfg_.seed, "pretrain");
    const Probe<float> probe = [&](const Model& m) {
      return probe_requirement(m, probe_set, RequirementKind::speed, original_conditioning, sub_seed(cfg_.seed, "probe"),
                               cfg_.probe_samples, cfg_.catalog, cfg_.scales, cfg_.tolerances, cfg_.sampling);
    };
    auto r = pretrain(Model::initialize(cfg_.model, sub_seed(cfg_.seed, "init")), split.train, split.validation, tc, probe,
                      cfg_.verbose);
    r.history.metric_name = "speed_violation";
    write_file_atomic(paths_.history("pretrain"), history_csv(r.history));
    save_checkpoint(paths_.pretrained(), r.parameters, provenance("pretrain", {{"best_epoch", r.best_epoch}}));
    log("pretrain", "best epoch " + std::to_string(r.best_epoch));
    return r;
  }

  // simft ------------------------------------------------------------------

  void simft_stage(SimftStage stage, RequirementKind kind) const {
    write_config();
    if (stage != SimftStage::sft && is_original(kind))
      throw std::invalid_argument(std::string(simft_stage_name(stage)) + " applies to the new requirements (bbox, cost)");
    const Model pre = load_model(paths_.pretrained());
    switch (stage) {
      case SimftStage::sft: run_sft(pre, kind); break;
      case SimftStage::dpo: run_dpo(pre, kind); break;
      case SimftStage::ppo: run_ppo(pre, kind); break;
    }
  }

  // baselines ----------------------------------------------------------------

  /// Records the grids and member checkpoints; interpolation happens at sampling time.
  void baseline_rs() const {
    write_config();
    json members = json::object();
    for (auto k : kAllRequirementKinds) {
      const auto p = evaluation_model_path(k);
      require_file(p);
      members[std::string(kind_name(k))] = fs::relative(p, paths_.root).generic_string();
    }
    write_json(paths_.rs_index(), {{"members", members},
                                   {"grid_2", cfg_.rs_grid_2.value_or(default_rs_grid(2)).rows},
                                   {"grid_3", cfg_.rs_grid_3.value_or(default_rs_grid(3)).rows}});
    log("baseline rs", "indexed " + std::to_string(members.size()) + " SimFT models");
  }

  void baseline_ric() const {
    write_config();
    const Model pre = load_model(paths_.pretrained());
    const auto s = splits();
    const auto seed = sub_seed(cfg_.seed, "ric");
    auto train = ric_build_dataset(pre, s.ft_parts.train, seed, cfg_.catalog, cfg_.tolerances, cfg_.scales, cfg_.sampling);
    auto val = ric_build_dataset(pre, s.ft_parts.validation, seed + 1, cfg_.catalog, cfg_.tolerances, cfg_.scales,
                                 cfg_.sampling);
    std::vector<LabeledExample> all = train;
    all.insert(all.end(), val.begin(), val.end());
    save_examples(paths_.ric_data(), all);
    TrainingConfig tc = cfg_.training.ric;
    tc.seed = seed;
    const auto probe_set = load_problems(paths_.probe_problems());
    const Probe<float> probe = [&](const Model& m) {
      return probe_requirement(
          m, probe_set, RequirementKind::cost,
          [](const Problem& p) {
            Conditioning c = full_conditioning(p);
            c.preference = std::array<double, 4>{1, 1, 1, 1};
            return c;
          },
          sub_seed(cfg_.seed, "probe"), cfg_.probe_samples, cfg_.catalog, cfg_.scales, cfg_.tolerances, cfg_.sampling);
    };
    auto r = ric_train(pre, train, val, tc, probe, cfg_.verbose);
    r.history.metric_name = "cost_percent_met";
    write_file_atomic(paths_.history("ric"), history_csv(r.history));
    save_checkpoint(paths_.ric_model(), r.parameters, provenance("ric", {{"best_epoch", r.best_epoch}}));
    log("baseline ric", std::to_string(train.size()) + " training examples, best epoch " + std::to_string(r.best_epoch));
  }

  // pareto -----------------------------------------------------------------

  /// SimFT model used for requirement k at evaluation time.
  fs::path evaluation_model_path(RequirementKind k) const {
    if (is_original(k)) return paths_.simft_model(SimftStage::sft, k);
    return paths_.simft_model(parse_simft_stage(cfg_.new_requirement_stage), k);
  }

  void pareto(Method method, int budget) const {
    write_config();
    const auto problems = load_problems(paths_.test_problems());
    std::optional<Model> pretrained, ric;
    std::map<RequirementKind, Model> simft;
    ModelBank bank;
    bank.rs_grid_2 = cfg_.rs_grid_2;
    bank.rs_grid_3 = cfg_.rs_grid_3;
    bank.ric_grid_2 = cfg_.ric_grid_2;
    bank.ric_grid_3 = cfg_.ric_grid_3;
    auto need_simft = [&] {
      for (const auto& sc : cfg_.scenarios)
        for (auto k : sc.kinds)
          if (!simft.count(k)) simft.emplace(k, load_model(evaluation_model_path(k)));
      for (const auto& [k, m] : simft) bank.simft[k] = &m;
    };
    switch (method) {
      case Method::baseline_random:
      case Method::epsilon_only:
        pretrained.emplace(load_model(paths_.pretrained()));
        bank.pretrained = &*pretrained;
        break;
      case Method::rewarded_soup:
        require_file(paths_.rs_index());
        need_simft();
        break;
      case Method::simft_only:
      case Method::e_simft: need_simft(); break;
      case Method::ric:
        ric.emplace(load_model(paths_.ric_model()));
        bank.ric = &*ric;
        break;
    }
    const EvalConfig ec{cfg_.scales, cfg_.epsilon, cfg_.sampling, cfg_.catalog, sub_seed(cfg_.seed, "pareto")};
    for (const auto& sc : cfg_.scenarios) {
      double total = 0;
      for (std::size_t i = 0; i < problems.size(); ++i) {
        const auto cell = run_method(method, sc, problems[i], static_cast<std::uint64_t>(i), budget, bank, ec);
        total += cell.hypervolume;
        write_json(paths_.cell(budget, method, sc, static_cast<int>(i)), cell_to_json(cell, static_cast<int>(i)));
      }
      if (cfg_.verbose)
        std::cerr << "[pareto] " << method_name(method) << " N=" << budget << " " << sc.name()
                  << " mean hypervolume " << total / static_cast<double>(problems.size()) << "\n";
    }
    log("pareto", std::string(method_name(method)) + " N=" + std::to_string(budget) + " done");
  }

  // report -----------------------------------------------------------------

  struct ScenarioStats {
    double mean = 0;
    double stdev = 0;
    std::vector<double> values;
  };

  /// Hypervolumes per (budget, method, scenario) read back from the cell files.
  std::map<std::tuple<int, Method, std::string>, ScenarioStats> collect_cells() const {
    const auto problems = load_problems(paths_.test_problems());
    std::map<std::tuple<int, Method, std::string>, ScenarioStats> out;
    for (int budget : cfg_.budgets)
      for (auto m : cfg_.methods)
        for (const auto& sc : cfg_.scenarios) {
          ScenarioStats s;
          for (std::size_t i = 0; i < problems.size(); ++i)
            s.values.push_back(read_json(paths_.cell(budget, m, sc, static_cast<int>(i))).at("hypervolume").get<double>());
          summarize(s);
          out[{budget, m, sc.name()}] = s;
        }
    return out;
  }

  std::string report() const {
    write_config();
    const auto cells = collect_cells();
    std::vector<Method> methods;
    for (auto m : kAllMethods)
      if (std::find(cfg_.methods.begin(), cfg_.methods.end(), m) != cfg_.methods.end()) methods.push_back(m);
    std::string csv = "budget,scenario";
    for (auto m : methods) csv += "," + std::string(method_name(m)) + "_mean," + std::string(method_name(m)) + "_std";
    csv += ",winner\n";
    char buf[64];
    auto row = [&](int budget, const std::string& label, const std::vector<ScenarioStats>& stats) {
      csv += std::to_string(budget) + "," + label;
      std::size_t best = 0;
      for (std::size_t i = 0; i < stats.size(); ++i) {
        std::snprintf(buf, sizeof buf, ",%.6f,%.6f", stats[i].mean, stats[i].stdev);
        csv += buf;
        if (stats[i].mean > stats[best].mean) best = i;
      }
      csv += "," + (stats.empty() ? std::string() : std::string(method_name(methods[best]))) + "\n";
    };
    for (int budget : cfg_.budgets)
      for (std::size_t size : {2u, 3u}) {
        std::vector<ScenarioStats> pooled(methods.size());
        bool any = false;
        for (const auto& sc : cfg_.scenarios) {
          if (sc.size() != size) continue;
          any = true;
          std::vector<ScenarioStats> stats;
          for (std::size_t i = 0; i < methods.size(); ++i) {
            stats.push_back(cells.at({budget, methods[i], sc.name()}));
            pooled[i].values.insert(pooled[i].values.end(), stats.back().values.begin(), stats.back().values.end());
          }
          row(budget, sc.name(), stats);
        }
        if (!any) continue;
        for (auto& p : pooled) summarize(p);
        row(budget, "mean_" + std::to_string(size) + "req", pooled);
      }
    write_file_atomic(paths_.report(), csv);
    for (const auto& sc : cfg_.scenarios) write_file_atomic(paths_.svg(sc), scatter_svg(sc, methods));
    log("report", "wrote " + paths_.report().string());
    return csv;
  }

  // everything -------------------------------------------------------------

  void run_all() const {
    gen_data();
    pretrain_stage();
    for (auto k : kAllRequirementKinds) simft_stage(SimftStage::sft, k);
    for (auto k : {RequirementKind::bbox, RequirementKind::cost}) {
      simft_stage(SimftStage::dpo, k);
      simft_stage(SimftStage::ppo, k);
    }
    baseline_rs();
    baseline_ric();
    for (int budget : cfg_.budgets)
      for (auto m : cfg_.methods) pareto(m, budget);
    report();
  }

  std::vector<Problem> load_problems(const fs::path& p) const { return problems_from_json(read_json(p)); }

  DatasetSplits splits() const {
    return split_dataset(load_examples(paths_.finetune_pool(), cfg_.catalog), sub_seed(cfg_.seed, "split"));
  }

 private:
  ExperimentConfig cfg_;
  ArtifactPaths paths_;

  void write_config() const { write_json(paths_.config(), config_to_json(cfg_)); }

  void log(const std::string& stage, const std::string& msg) const {
    if (cfg_.verbose) std::cerr << "[" << stage << "] " << msg << "\n";
  }

  json provenance(const std::string& stage, json extra = json::object()) const {
    extra["stage"] = stage;
    extra["seed"] = cfg_.seed;
    return extra;
  }

  static void summarize(ScenarioStats& s) {
    const double n = static_cast<double>(s.values.size());
    s.mean = n > 0 ? std::accumulate(s.values.begin(), s.values.end(), 0.0) / n : 0.0;
    double ss = 0;
    for (double v : s.values) ss += (v - s.mean) * (v - s.mean);
    s.stdev = n > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  }

  Probe<float> new_requirement_probe(RequirementKind kind) const {
    auto problems = with_only_bound(load_problems(paths_.probe_problems()), kind);
    return [this, problems, kind](const Model& m) {
      return probe_requirement(
          m, problems, kind, [kind](const Problem& p) { return detail::specialist_conditioning(p, kind); },
          sub_seed(cfg_.seed, "probe"), cfg_.probe_samples, cfg_.catalog, cfg_.scales, cfg_.tolerances, cfg_.sampling);
    };
  }

  void run_sft(const Model& pre, RequirementKind kind) const {
    const auto s = splits();
    const auto problems = problems_of(s.ft1);
    const auto seed = sub_seed(cfg_.seed, "sft-" + std::string(kind_name(kind)));
    std::vector<LabeledExample> data;
    TrainingConfig tc;
    Probe<float> probe;
    if (is_original(kind)) {
      auto d = generate_sft_original(pre, problems, kind, cfg_.tolerances.of(kind), cfg_.max_draws_per_problem, seed,
                                     cfg_.catalog, cfg_.sampling, cfg_.scales);
      log("simft sft", std::string(kind_name(kind)) + " acceptance rate " + std::to_string(d.acceptance_rate()));
      data = std::move(d.examples);
      tc = cfg_.training.sft_original;
      const auto probe_set = load_problems(paths_.probe_problems());
      probe = [this, probe_set, kind](const Model& m) {
        return probe_requirement(m, probe_set, kind, original_conditioning, sub_seed(cfg_.seed, "probe"), cfg_.probe_samples,
                                 cfg_.catalog, cfg_.scales, cfg_.tolerances, cfg_.sampling);
      };
    } else {
      data = generate_sft_new(pre, problems, kind, uniform_slack(cfg_.slack_fraction * cfg_.scales.of(kind)), seed,
                              cfg_.catalog, cfg_.sampling);
      tc = cfg_.training.sft_new;
      probe = new_requirement_probe(kind);
    }
    if (data.size() < 2) throw std::runtime_error("too few SFT examples for " + std::string(kind_name(kind)));
    save_examples(paths_.stage_data(SimftStage::sft, kind), data);
    tc.seed = seed;
    const auto split = train_val_split(data);
    auto r = sft_train(pre, split.train, split.validation, tc, probe, cfg_.verbose);
    r.history.metric_name = is_original(kind) ? "violation" : "percent_met";
    write_file_atomic(paths_.history("sft_" + std::string(kind_name(kind))), history_csv(r.history));
    save_checkpoint(paths_.simft_model(SimftStage::sft, kind), r.parameters,
                    provenance("sft", {{"requirement", kind_name(kind)}, {"best_epoch", r.best_epoch},
                                       {"examples", data.size()}}));
    log("simft sft", std::string(kind_name(kind)) + ": " + std::to_string(data.size()) + " examples, best epoch " +
                         std::to_string(r.best_epoch));
  }

  void finish_multi_epoch(SimftStage stage, RequirementKind kind, MultiEpochResult<float>& r) const {
    r.history.metric_name = "percent_met";
    for (std::size_t e = 0; e < r.per_epoch.size(); ++e) {
      const auto p = paths_.epoch_model(stage, kind, static_cast<int>(e) + 1);
      save_checkpoint(p, r.per_epoch[e], provenance(std::string(simft_stage_name(stage)),
                                                    {{"requirement", kind_name(kind)}, {"epoch", e + 1}}));
      r.history.epochs[e].checkpoint = fs::relative(p, paths_.root).generic_string();
    }
    const std::string stem = std::string(simft_stage_name(stage)) + "_" + std::string(kind_name(kind));
    write_file_atomic(paths_.history(stem), history_csv(r.history));
    if (r.per_epoch.empty()) throw std::runtime_error(stem + ": no epochs were run");
    const auto choice = select_checkpoint(r.history, cfg_.validity_threshold, true);
    const auto& rec = r.history.epochs[static_cast<std::size_t>(choice.epoch - 1)];
    save_checkpoint(paths_.simft_model(stage, kind), r.per_epoch[static_cast<std::size_t>(choice.epoch - 1)],
                    provenance(std::string(simft_stage_name(stage)),
                               {{"requirement", kind_name(kind)}, {"selected_epoch", choice.epoch}}));
    write_json(paths_.selection(stage, kind), {{"epoch", choice.epoch},
                                               {"met_threshold", choice.met_threshold},
                                               {"validity", rec.validity},
                                               {"metric", rec.metric},
                                               {"initial_loss", r.initial_loss}});
    log("simft " + std::string(simft_stage_name(stage)),
        std::string(kind_name(kind)) + ": selected epoch " + std::to_string(choice.epoch));
  }

  void run_dpo(const Model& pre, RequirementKind kind) const {
    const Model sft = load_model(paths_.simft_model(SimftStage::sft, kind));
    const auto s = splits();
    const auto seed = sub_seed(cfg_.seed, "dpo-" + std::string(kind_name(kind)));
    const auto pairs = generate_preference_pairs(pre, problems_of(s.ft2), kind, seed, cfg_.catalog, cfg_.sampling);
    if (pairs.size() < 2) throw std::runtime_error("too few preference pairs for " + std::string(kind_name(kind)));
    save_pairs(paths_.stage_data(SimftStage::dpo, kind), pairs);
    const std::size_t n_val = (pairs.size() + 5) / 10;
    const std::vector<PreferencePair> train(pairs.begin(), pairs.end() - static_cast<std::ptrdiff_t>(n_val));
    const std::vector<PreferencePair> val(pairs.end() - static_cast<std::ptrdiff_t>(n_val), pairs.end());
    TrainingConfig tc = cfg_.training.dpo;
    tc.seed = seed;
    auto r = dpo_train(sft, train, val, tc, new_requirement_probe(kind), cfg_.verbose);
    finish_multi_epoch(SimftStage::dpo, kind, r);
  }

  void run_ppo(const Model& pre, RequirementKind kind) const {
    const Model sft = load_model(paths_.simft_model(SimftStage::sft, kind));
    const auto s = splits();
    const auto seed = sub_seed(cfg_.seed, "ppo-" + std::string(kind_name(kind)));
    const auto labeled = generate_sft_new(pre, problems_of(s.ft2), kind,
                                          uniform_slack(cfg_.slack_fraction * cfg_.scales.of(kind)), seed, cfg_.catalog,
                                          cfg_.sampling);
    const auto problems = problems_of(labeled);
    if (problems.size() < 2) throw std::runtime_error("too few PPO problems for " + std::string(kind_name(kind)));
    write_json(paths_.stage_data(SimftStage::ppo, kind), problems_to_json(problems));
    const std::size_t n_val = (problems.size() + 5) / 10;
    const std::vector<Problem> train(problems.begin(), problems.end() - static_cast<std::ptrdiff_t>(n_val));
    const std::vector<Problem> val(problems.end() - static_cast<std::ptrdiff_t>(n_val), problems.end());
    TrainingConfig tc = cfg_.training.ppo;
    tc.seed = seed;
    auto r = ppo_train(sft, train, kind, tc, cfg_.catalog, cfg_.scales, new_requirement_probe(kind), val, cfg_.verbose);
    finish_multi_epoch(SimftStage::ppo, kind, r);
  }

  std::string scatter_svg(const Scenario& sc, const std::vector<Method>& methods) const {
    static constexpr std::array<const char*, 6> colors{"#7f7f7f", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#d62728"};
    const int size = 480, margin = 60, plot = size - 2 * margin;
    const int budget = cfg_.budgets.front();
    char buf[256];
    std::string svg;
    std::snprintf(buf, sizeof buf,
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" viewBox=\"0 0 %d %d\">\n",
                  size + 170, size, size + 170, size);
    svg += buf;
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"none\" stroke=\"black\"/>\n", margin, margin,
                  plot, plot);
    svg += buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"30\" font-family=\"sans-serif\" font-size=\"14\">%s, problem 0, N=%d</text>\n",
                  margin, sc.name().c_str(), budget);
    svg += buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%d\" y=\"%d\" font-family=\"sans-serif\" font-size=\"12\">%s violation</text>\n",
                  margin + plot / 2 - 40, size - 20, std::string(kind_name(sc.kinds[0])).c_str());
    svg += buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"15\" y=\"%d\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 15 %d)\">%s violation</text>\n",
                  margin + plot / 2 + 40, margin + plot / 2 + 40, std::string(kind_name(sc.kinds[1])).c_str());
    svg += buf;
    for (int t = 0; t <= 4; ++t) {
      const double v = t / 4.0;
      std::snprintf(buf, sizeof buf,
                    "<text x=\"%.1f\" y=\"%d\" font-family=\"sans-serif\" font-size=\"10\">%.2f</text>\n"
                    "<text x=\"%d\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"10\">%.2f</text>\n",
                    margin + v * plot - 10, margin + plot + 15, v, margin - 35, margin + (1 - v) * plot + 4, v);
      svg += buf;
    }
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      const auto cell = cell_from_json(read_json(paths_.cell(budget, methods[mi], sc, 0)));
      const char* color = colors[static_cast<std::size_t>(methods[mi])];
      std::vector<bool> on_front(cell.points.size(), false);
      for (auto i : cell.front) on_front[i] = true;
      for (std::size_t i = 0; i < cell.points.size(); ++i) {
        const auto& v = cell.points[i].violations;
        std::snprintf(buf, sizeof buf,
                      "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"%d\" fill=\"%s\" fill-opacity=\"%s\"/>\n",
                      margin + v[0] * plot, margin + (1 - v[1]) * plot, on_front[i] ? 5 : 3, color,
                      on_front[i] ? "0.9" : "0.35");
        svg += buf;
      }
      std::snprintf(buf, sizeof buf,
                    "<circle cx=\"%d\" cy=\"%d\" r=\"5\" fill=\"%s\"/><text x=\"%d\" y=\"%d\" font-family=\"sans-serif\" "
                    "font-size=\"12\">%s (%.3f)</text>\n",
                    size + 5, margin + 10 + 22 * static_cast<int>(mi), color, size + 15, margin + 14 + 22 * static_cast<int>(mi),
                    std::string(method_name(methods[mi])).c_str(), cell.hypervolume);
      svg += buf;
    }
    svg += "</svg>\n";
    return svg;
  }
};

}  // namespace esimft
