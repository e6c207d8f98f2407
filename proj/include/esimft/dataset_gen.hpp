#pragma once

// Synthetic datasets: perfect-label pre-training data, fine-tuning splits, and
// the simulator-filtered data used by every fine-tuning stage.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "esimft/io.hpp"
#include "esimft/seq_model.hpp"
#include "esimft/simulator.hpp"

namespace esimft {

struct Problem {
  double speed_target = 0.0;  // log ratio
  Vec3 position_target{0.0, 0.0, 0.0};
  std::optional<double> bbox_bound;
  std::optional<double> cost_bound;

  std::optional<double> bound(RequirementKind k) const {
    if (k == RequirementKind::bbox) return bbox_bound;
    if (k == RequirementKind::cost) return cost_bound;
    return std::nullopt;
  }
  void set_bound(RequirementKind k, double v) {
    if (k == RequirementKind::bbox) bbox_bound = v;
    else if (k == RequirementKind::cost) cost_bound = v;
    else throw std::invalid_argument("only bbox and cost carry bounds");
  }
  bool operator==(const Problem&) const = default;
};

inline void check_problem(const Problem& p) {
  if (!std::isfinite(p.speed_target)) throw std::invalid_argument("speed target must be finite");
  for (double v : p.position_target)
    if (!std::isfinite(v)) throw std::invalid_argument("position target must be finite");
  for (auto b : {p.bbox_bound, p.cost_bound})
    if (b && !(*b > 0)) throw std::invalid_argument("bounds must be positive");
}

/// Targets only; bounds and preferences are opt-in per model.
inline Conditioning original_conditioning(const Problem& p) {
  Conditioning c;
  c.speed_target = p.speed_target;
  c.position_target = p.position_target;
  return c;
}

/// Targets plus whichever bounds the problem carries.
inline Conditioning full_conditioning(const Problem& p) {
  Conditioning c = original_conditioning(p);
  c.bbox_bound = p.bbox_bound;
  c.cost_bound = p.cost_bound;
  return c;
}

inline Problem problem_from_metrics(const SimulationResult& r) {
  Problem p;
  p.speed_target = r.log_speed_ratio;
  p.position_target = r.output_position;
  return p;
}

inline RequirementSpec requirement_for(const Problem& p, RequirementKind k, const ViolationScales& s) {
  switch (k) {
    case RequirementKind::speed: return RequirementSpec::speed(p.speed_target, s.speed);
    case RequirementKind::position: return RequirementSpec::position(p.position_target, s.position);
    case RequirementKind::bbox:
    case RequirementKind::cost: {
      auto b = p.bound(k);
      if (!b) throw std::invalid_argument("problem has no " + std::string(kind_name(k)) + " bound");
      return k == RequirementKind::bbox ? RequirementSpec::bbox(*b, s.bbox) : RequirementSpec::cost(*b, s.cost);
    }
  }
  throw std::logic_error("unreachable");
}

/// Acceptance tolerances for equality requirements (native units).
struct Tolerances {
  double speed = 0.05;
  double position = 0.05;
  double of(RequirementKind k) const {
    if (k == RequirementKind::speed) return speed;
    if (k == RequirementKind::position) return position;
    return 0.0;
  }
};

/// Met means violation <= tolerance for equality kinds, within bound otherwise.
inline bool meets(const SimulationResult& r, const Problem& p, RequirementKind k, const Tolerances& tol,
                  const ViolationScales& scales = {}) {
  if (!r.valid) return false;
  return violation(r, requirement_for(p, k, scales)) <= tol.of(k);
}

struct LabeledExample {
  Problem problem;
  DesignSequence sequence;
  SimulationResult metrics;
  std::optional<std::array<double, 4>> preference;  // RiC data only
};

inline LabeledExample make_example(const Problem& p, DesignSequence seq, const GearCatalog& catalog) {
  LabeledExample e{p, std::move(seq), {}, std::nullopt};
  e.metrics = simulate(e.sequence, catalog);
  return e;
}

// ---------------------------------------------------------------------------
// Pre-training data and splits

/// Rule-generated designs labeled with their own simulated metrics. Example i
/// draws from its own stream derived from (seed, i).
inline std::vector<LabeledExample> generate_pretrain_dataset(int n, std::uint64_t seed, const GearCatalog& catalog) {
  if (n < 1) throw std::invalid_argument("dataset size must be >= 1");
  std::vector<LabeledExample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng = derive_rng(seed, {stream_tag("design"), static_cast<std::uint64_t>(i)});
    DesignSequence seq = random_design(rng);
    SimulationResult r = simulate(seq, catalog);
    out.push_back({problem_from_metrics(r), std::move(seq), r, std::nullopt});
  }
  return out;
}

struct TrainValSplit {
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> validation;
};

struct DatasetSplits {
  std::vector<LabeledExample> ft;
  std::vector<LabeledExample> test;
  std::vector<LabeledExample> ft1;
  std::vector<LabeledExample> ft2;
  TrainValSplit ft_parts;
  TrainValSplit ft1_parts;
  TrainValSplit ft2_parts;
};

/// First 90% train, last 10% validation (rounded to nearest).
inline TrainValSplit train_val_split(const std::vector<LabeledExample>& xs) {
  const std::size_t n_val = (xs.size() + 5) / 10;
  TrainValSplit s;
  s.train.assign(xs.begin(), xs.end() - static_cast<std::ptrdiff_t>(n_val));
  s.validation.assign(xs.end() - static_cast<std::ptrdiff_t>(n_val), xs.end());
  return s;
}

inline DatasetSplits split_dataset(const std::vector<LabeledExample>& data, std::uint64_t seed) {
  if (data.size() < 40) throw std::invalid_argument("dataset too small to split (need at least 40 examples)");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = derive_rng(seed, {stream_tag("split")});
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t n_test = (data.size() * 5 + 50) / 100;
  DatasetSplits s;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_test ? s.test : s.ft).push_back(data[order[i]]);
  const std::size_t half = s.ft.size() / 2;
  s.ft1.assign(s.ft.begin(), s.ft.begin() + static_cast<std::ptrdiff_t>(half));
  s.ft2.assign(s.ft.begin() + static_cast<std::ptrdiff_t>(half), s.ft.end());
  s.ft_parts = train_val_split(s.ft);
  s.ft1_parts = train_val_split(s.ft1);
  s.ft2_parts = train_val_split(s.ft2);
  return s;
}

inline std::vector<Problem> problems_of(const std::vector<LabeledExample>& xs) {
  std::vector<Problem> ps;
  ps.reserve(xs.size());
  for (const auto& x : xs) ps.push_back(x.problem);
  return ps;
}

// ---------------------------------------------------------------------------
// Model-sampled data

inline constexpr int kMaxValidRedraws = 10;

struct ValidSample {
  DesignSequence sequence;
  SimulationResult metrics;
};

/// Up to `tries` draws until a grammar-valid design appears.
template <class T>
std::optional<ValidSample> sample_valid(const ConditionalSequenceModel<T>& model, const Conditioning& c,
                                        const SamplingConfig& cfg, Rng& rng, const GearCatalog& catalog,
                                        int tries = kMaxValidRedraws) {
  for (int i = 0; i < tries; ++i) {
    DesignSequence seq = sample(model, c, cfg, rng);
    SimulationResult r = simulate(seq, catalog);
    if (r.valid) return ValidSample{std::move(seq), r};
  }
  return std::nullopt;
}

struct SftOriginalData {
  std::vector<LabeledExample> examples;
  int draws = 0;
  int accepted = 0;
  double acceptance_rate() const { return draws == 0 ? 0.0 : static_cast<double>(accepted) / draws; }
};

/// Offline rejection sampling for an equality requirement. Every accepted
/// sample keeps the original target for `kind` and is relabeled with its
/// achieved metrics for the other original requirement.
template <class T>
SftOriginalData generate_sft_original(const ConditionalSequenceModel<T>& model, const std::vector<Problem>& problems,
                                      RequirementKind kind, double tolerance, int max_draws_per_problem,
                                      std::uint64_t seed, const GearCatalog& catalog, const SamplingConfig& cfg = {},
                                      const ViolationScales& scales = {}) {
  if (!is_original(kind)) throw std::invalid_argument("rejection-sampled SFT data is for speed or position");
  if (!(tolerance > 0)) throw std::invalid_argument("tolerance must be positive");
  SftOriginalData out;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    const Problem& p = problems[i];
    Rng rng = derive_rng(seed, {stream_tag("sft-original"), static_cast<std::uint64_t>(i)});
    const RequirementSpec req = requirement_for(p, kind, scales);
    for (int d = 0; d < max_draws_per_problem; ++d) {
      DesignSequence seq = sample(model, original_conditioning(p), cfg, rng);
      SimulationResult r = simulate(seq, catalog);
      ++out.draws;
      if (!r.valid || violation(r, req) > tolerance) continue;
      ++out.accepted;
      Problem relabeled = problem_from_metrics(r);
      if (kind == RequirementKind::speed) relabeled.speed_target = p.speed_target;
      else relabeled.position_target = p.position_target;
      out.examples.push_back({relabeled, std::move(seq), r, std::nullopt});
    }
  }
  return out;
}

using SlackSampler = std::function<double(Rng&)>;

inline SlackSampler uniform_slack(double hi) {
  return [hi](Rng& rng) { return hi > 0 ? uniform_real(rng, 0.0, hi) : 0.0; };
}

/// Bound-augmented SFT data for an inequality requirement: one valid sample per
/// problem, bound = achieved value + slack. Original targets are relabeled to
/// the sample's achieved metrics so the conditioning stays self-consistent.
template <class T>
std::vector<LabeledExample> generate_sft_new(const ConditionalSequenceModel<T>& model, const std::vector<Problem>& problems,
                                             RequirementKind kind, const SlackSampler& slack, std::uint64_t seed,
                                             const GearCatalog& catalog, const SamplingConfig& cfg = {}) {
  if (is_original(kind)) throw std::invalid_argument("bound-augmented SFT data is for bbox or cost");
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    Rng rng = derive_rng(seed, {stream_tag("sft-new"), static_cast<std::uint64_t>(i)});
    auto s = sample_valid(model, original_conditioning(problems[i]), cfg, rng, catalog);
    if (!s) continue;
    const double extra = slack(rng);
    if (!(extra >= 0)) throw std::invalid_argument("slack sampler produced a negative value");
    Problem p = problem_from_metrics(s->metrics);
    p.set_bound(kind, requirement_value(s->metrics, kind) + extra);
    out.push_back({p, std::move(s->sequence), s->metrics, std::nullopt});
  }
  return out;
}

struct PreferencePair {
  Problem problem;  // carries the bound for `kind`
  RequirementKind kind = RequirementKind::cost;
  double bound = 0.0;
  DesignSequence preferred;
  DesignSequence rejected;
};

/// Two valid samples per problem; the lower requirement value is preferred and
/// the bound is the mean of the two values. Ties are skipped.
template <class T>
std::vector<PreferencePair> generate_preference_pairs(const ConditionalSequenceModel<T>& model,
                                                      const std::vector<Problem>& problems, RequirementKind kind,
                                                      std::uint64_t seed, const GearCatalog& catalog,
                                                      const SamplingConfig& cfg = {}) {
  if (is_original(kind)) throw std::invalid_argument("preference pairs are for bbox or cost");
  std::vector<PreferencePair> out;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    Rng rng = derive_rng(seed, {stream_tag("pref-pairs"), static_cast<std::uint64_t>(i)});
    const Conditioning c = original_conditioning(problems[i]);
    auto a = sample_valid(model, c, cfg, rng, catalog);
    auto b = sample_valid(model, c, cfg, rng, catalog);
    if (!a || !b) continue;
    const double va = requirement_value(a->metrics, kind);
    const double vb = requirement_value(b->metrics, kind);
    if (va == vb) continue;
    PreferencePair pair;
    pair.kind = kind;
    pair.bound = 0.5 * (va + vb);
    pair.problem = problems[i];
    pair.problem.bbox_bound.reset();
    pair.problem.cost_bound.reset();
    pair.problem.set_bound(kind, pair.bound);
    pair.preferred = va < vb ? a->sequence : b->sequence;
    pair.rejected = va < vb ? b->sequence : a->sequence;
    out.push_back(std::move(pair));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON forms

inline json optional_to_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline std::optional<double> optional_from_json(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

inline json problem_to_json(const Problem& p) {
  return {{"speed_log", p.speed_target},
          {"pos", {p.position_target[0], p.position_target[1], p.position_target[2]}},
          {"bbox_bound", optional_to_json(p.bbox_bound)},
          {"cost_bound", optional_to_json(p.cost_bound)}};
}

inline Problem problem_from_json(const json& j) {
  Problem p;
  p.speed_target = j.at("speed_log").get<double>();
  const auto pos = j.at("pos").get<std::vector<double>>();
  if (pos.size() != 3) throw std::invalid_argument("pos must have 3 components");
  p.position_target = {pos[0], pos[1], pos[2]};
  p.bbox_bound = optional_from_json(j, "bbox_bound");
  p.cost_bound = optional_from_json(j, "cost_bound");
  return p;
}

/// One JSONL line: conditioning targets, simulated bbox/cost of the tokens, and
/// at most one bound. Examples carrying both bounds or a preference vector add
/// "bounds" and "pref" keys.
inline json example_to_json(const LabeledExample& e) {
  json j = {{"tokens", to_ids(e.sequence)},
            {"speed_log", e.problem.speed_target},
            {"pos", {e.problem.position_target[0], e.problem.position_target[1], e.problem.position_target[2]}},
            {"bbox", e.metrics.valid ? json(e.metrics.bbox_volume) : json(nullptr)},
            {"cost", e.metrics.valid ? json(e.metrics.cost) : json(nullptr)},
            {"bound", nullptr},
            {"bound_kind", nullptr}};
  const bool both = e.problem.bbox_bound && e.problem.cost_bound;
  if (both || e.preference) {
    j["bounds"] = {{"bbox", optional_to_json(e.problem.bbox_bound)}, {"cost", optional_to_json(e.problem.cost_bound)}};
  } else if (e.problem.bbox_bound) {
    j["bound"] = *e.problem.bbox_bound;
    j["bound_kind"] = "bbox";
  } else if (e.problem.cost_bound) {
    j["bound"] = *e.problem.cost_bound;
    j["bound_kind"] = "cost";
  }
  if (e.preference) j["pref"] = *e.preference;
  return j;
}

inline LabeledExample example_from_json(const json& j, const GearCatalog& catalog) {
  Problem p;
  p.speed_target = j.at("speed_log").get<double>();
  const auto pos = j.at("pos").get<std::vector<double>>();
  if (pos.size() != 3) throw std::invalid_argument("pos must have 3 components");
  p.position_target = {pos[0], pos[1], pos[2]};
  if (j.contains("bounds")) {
    p.bbox_bound = optional_from_json(j.at("bounds"), "bbox");
    p.cost_bound = optional_from_json(j.at("bounds"), "cost");
  } else if (!j.at("bound").is_null()) {
    p.set_bound(parse_kind(j.at("bound_kind").get<std::string>()), j.at("bound").get<double>());
  }
  LabeledExample e = make_example(p, from_ids(j.at("tokens").get<std::vector<int>>()), catalog);
  if (j.contains("pref")) e.preference = j.at("pref").get<std::array<double, 4>>();
  return e;
}

inline json pair_to_json(const PreferencePair& p) {
  return {{"problem", problem_to_json(p.problem)},
          {"bound", p.bound},
          {"bound_kind", kind_name(p.kind)},
          {"xw", to_ids(p.preferred)},
          {"xl", to_ids(p.rejected)}};
}

inline PreferencePair pair_from_json(const json& j) {
  PreferencePair p;
  p.problem = problem_from_json(j.at("problem"));
  p.bound = j.at("bound").get<double>();
  p.kind = parse_kind(j.at("bound_kind").get<std::string>());
  p.preferred = from_ids(j.at("xw").get<std::vector<int>>());
  p.rejected = from_ids(j.at("xl").get<std::vector<int>>());
  return p;
}

inline void save_examples(const fs::path& path, const std::vector<LabeledExample>& xs) {
  std::vector<json> lines;
  lines.reserve(xs.size());
  for (const auto& x : xs) lines.push_back(example_to_json(x));
  write_jsonl(path, lines);
}

inline std::vector<LabeledExample> load_examples(const fs::path& path, const GearCatalog& catalog) {
  std::vector<LabeledExample> xs;
  for (const auto& l : read_jsonl(path)) xs.push_back(example_from_json(l, catalog));
  return xs;
}

inline void save_pairs(const fs::path& path, const std::vector<PreferencePair>& ps) {
  std::vector<json> lines;
  for (const auto& p : ps) lines.push_back(pair_to_json(p));
  write_jsonl(path, lines);
}

inline std::vector<PreferencePair> load_pairs(const fs::path& path) {
  std::vector<PreferencePair> ps;
  for (const auto& l : read_jsonl(path)) ps.push_back(pair_from_json(l));
  return ps;
}

}  // namespace esimft
