#pragma once

// Trade-off scenarios, epsilon-sampling, non-dominated filtering and exact
// hypervolume for 2 and 3 minimized objectives in [0, 1].

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "esimft/dataset_gen.hpp"
#include "esimft/seq_model.hpp"

namespace esimft {

// ---------------------------------------------------------------------------
// Scenarios

struct Scenario {
  std::vector<RequirementKind> kinds;

  std::size_t size() const { return kinds.size(); }
  bool contains(RequirementKind k) const { return std::find(kinds.begin(), kinds.end(), k) != kinds.end(); }
  std::string name() const {
    std::string out;
    for (auto k : kinds) {
      if (!out.empty()) out += '+';
      out += kind_name(k);
    }
    return out;
  }
  bool operator==(const Scenario&) const = default;
};

inline Scenario parse_scenario(const std::string& name) {
  Scenario s;
  std::size_t start = 0;
  while (start <= name.size()) {
    const auto stop = std::min(name.find('+', start), name.size());
    s.kinds.push_back(parse_kind(std::string_view(name).substr(start, stop - start)));
    start = stop + 1;
  }
  if (s.size() < 2 || s.size() > 3) throw std::invalid_argument("scenario must name 2 or 3 requirements: " + name);
  return s;
}

/// All pairs then all triples, in lexicographic order of the input positions.
inline std::vector<Scenario> enumerate_scenarios(const std::vector<RequirementKind>& kinds = {
                                                     kAllRequirementKinds.begin(), kAllRequirementKinds.end()}) {
  if (kinds.size() != 4) throw std::invalid_argument("scenario enumeration expects exactly 4 requirement kinds");
  std::vector<Scenario> out;
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b) out.push_back({{kinds[a], kinds[b]}});
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b)
      for (std::size_t c = b + 1; c < 4; ++c) out.push_back({{kinds[a], kinds[b], kinds[c]}});
  return out;
}

// ---------------------------------------------------------------------------
// Epsilon schedules

/// Evenly spaced inclusive grid; a single value sits at the midpoint.
inline std::vector<double> epsilon_schedule(double lo, double hi, int count) {
  if (!(lo <= hi)) throw std::invalid_argument("epsilon range must satisfy lo <= hi");
  if (count < 1) throw std::invalid_argument("epsilon count must be >= 1");
  if (count == 1) return {0.5 * (lo + hi)};
  std::vector<double> out(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (count - 1);
  out.back() = hi;
  return out;
}

struct EpsilonSettings {
  // Shift per epsilon unit in each requirement's native scale.
  double speed_unit = 0.1;       // log units
  double position_unit = 0.02;   // m, applied to every coordinate
  double bbox_unit = 0.005;      // m^3
  double cost_unit = 1.0;        // currency
  std::array<double, 2> equality_range{-5.0, 5.0};
  std::array<double, 2> inequality_range{0.0, 10.0};

  double unit(RequirementKind k) const {
    switch (k) {
      case RequirementKind::speed: return speed_unit;
      case RequirementKind::position: return position_unit;
      case RequirementKind::bbox: return bbox_unit;
      case RequirementKind::cost: return cost_unit;
    }
    return 1.0;
  }
  std::array<double, 2> range(RequirementKind k) const { return is_original(k) ? equality_range : inequality_range; }
};

/// Floor(n / k) per model, the remainder going to the first models.
inline std::vector<int> split_budget(int n, int k) {
  if (k < 1) throw std::invalid_argument("cannot split a budget over zero models");
  if (n < 0) throw std::invalid_argument("budget must be non-negative");
  std::vector<int> out(static_cast<std::size_t>(k), n / k);
  for (int i = 0; i < n % k; ++i) ++out[static_cast<std::size_t>(i)];
  return out;
}

/// Problem with requirement `k`'s target (equality) or bound (inequality)
/// shifted by eps units.
inline Problem shift_requirement(Problem p, RequirementKind k, double eps, const EpsilonSettings& s) {
  const double delta = eps * s.unit(k);
  switch (k) {
    case RequirementKind::speed: p.speed_target += delta; break;
    case RequirementKind::position:
      for (auto& x : p.position_target) x += delta;
      break;
    case RequirementKind::bbox:
    case RequirementKind::cost: {
      const auto b = p.bound(k);
      if (!b) throw std::invalid_argument("cannot shift an absent bound");
      p.set_bound(k, *b + delta);
      break;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Points, domination, hypervolume

struct PointSource {
  std::string method;
  std::string model;
  double epsilon = 0.0;
  int sample_index = 0;
};

struct ParetoPoint {
  std::vector<double> violations;
  PointSource source;
  DesignSequence sequence;
};

/// Normalized violations for the scenario's requirements; all ones for an
/// invalid design.
inline std::vector<double> violation_vector(const SimulationResult& r, const Problem& p, const Scenario& sc,
                                            const ViolationScales& scales) {
  std::vector<double> v(sc.size(), 1.0);
  if (!r.valid) return v;
  for (std::size_t i = 0; i < sc.size(); ++i)
    v[i] = normalize_violation(violation(r, requirement_for(p, sc.kinds[i], scales)), scales.of(sc.kinds[i]));
  return v;
}

inline bool dominates(const std::vector<double>& a, const std::vector<double>& b) {
  bool strict = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i]) return false;
    if (a[i] < b[i]) strict = true;
  }
  return strict;
}

/// Indices of the non-dominated points; of several identical vectors only
/// the first is kept.
inline std::vector<std::size_t> non_dominated_indices(const std::vector<std::vector<double>>& pts) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (pts[i].size() != pts.front().size()) throw std::invalid_argument("points must share one dimension");
    bool keep = true;
    for (std::size_t j = 0; j < pts.size() && keep; ++j) {
      if (j == i) continue;
      if (dominates(pts[j], pts[i]) || (j < i && pts[j] == pts[i])) keep = false;
    }
    if (keep) out.push_back(i);
  }
  return out;
}

inline std::vector<ParetoPoint> non_dominated(const std::vector<ParetoPoint>& points) {
  std::vector<std::vector<double>> v;
  for (const auto& p : points) v.push_back(p.violations);
  std::vector<ParetoPoint> out;
  for (auto i : non_dominated_indices(v)) out.push_back(points[i]);
  return out;
}

namespace detail {

// Area dominated by 2-D points within [0, 1]^2.
inline double hypervolume_2d(std::vector<std::array<double, 2>> pts) {
  if (pts.empty()) return 0.0;
  std::sort(pts.begin(), pts.end());
  double area = 0.0;
  double best_y = 1.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    best_y = std::min(best_y, pts[i][1]);
    const double next_x = i + 1 < pts.size() ? pts[i + 1][0] : 1.0;
    area += (next_x - pts[i][0]) * (1.0 - best_y);
  }
  return area;
}

}  // namespace detail

/// Measure of the union of boxes [p, (1, ..., 1)] for k = 2 or 3.
inline double hypervolume(const std::vector<std::vector<double>>& pts) {
  if (pts.empty()) return 0.0;
  const std::size_t k = pts.front().size();
  if (k != 2 && k != 3) throw std::invalid_argument("hypervolume supports 2 or 3 objectives");
  for (const auto& p : pts) {
    if (p.size() != k) throw std::invalid_argument("points must share one dimension");
    for (double x : p)
      if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("hypervolume points must lie in [0, 1]^k");
  }
  std::vector<std::vector<double>> front;
  for (auto i : non_dominated_indices(pts)) front.push_back(pts[i]);
  if (k == 2) {
    std::vector<std::array<double, 2>> p2;
    for (const auto& p : front) p2.push_back({p[0], p[1]});
    return detail::hypervolume_2d(std::move(p2));
  }
  // Slice along the third objective: between consecutive z levels the cross
  // section is the 2-D front of every point at or below that level.
  std::sort(front.begin(), front.end(), [](const auto& a, const auto& b) { return a[2] < b[2]; });
  double volume = 0.0;
  std::vector<std::array<double, 2>> active;
  for (std::size_t i = 0; i < front.size(); ++i) {
    active.push_back({front[i][0], front[i][1]});
    const double next_z = i + 1 < front.size() ? front[i + 1][2] : 1.0;
    if (next_z > front[i][2]) volume += (next_z - front[i][2]) * detail::hypervolume_2d(active);
  }
  return volume;
}

inline double hypervolume(const std::vector<ParetoPoint>& points) {
  std::vector<std::vector<double>> v;
  for (const auto& p : points) v.push_back(p.violations);
  return hypervolume(v);
}

// ---------------------------------------------------------------------------
// Methods

enum class Method : std::uint8_t { baseline_random, rewarded_soup, ric, simft_only, epsilon_only, e_simft };

inline constexpr std::array<Method, 6> kAllMethods{Method::baseline_random, Method::rewarded_soup, Method::ric,
                                                   Method::simft_only,      Method::epsilon_only,  Method::e_simft};

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::baseline_random: return "baseline_random";
    case Method::rewarded_soup: return "rewarded_soup";
    case Method::ric: return "ric";
    case Method::simft_only: return "simft_only";
    case Method::epsilon_only: return "epsilon_only";
    case Method::e_simft: return "e_simft";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (auto m : kAllMethods)
    if (method_name(m) == s) return m;
  throw std::invalid_argument("unknown method: " + std::string(s));
}

/// Weight rows over a scenario's requirements.
struct WeightGrid {
  std::vector<std::vector<double>> rows;

  std::size_t size() const { return rows.size(); }
};

struct EvalConfig {
  ViolationScales scales;
  EpsilonSettings epsilon;
  SamplingConfig sampling;
  GearCatalog catalog = default_catalog();
  std::uint64_t seed = 0;
};

/// Models a method may draw on. SimFT models are keyed by requirement; RS
/// interpolates them per grid row.
struct ModelBank {
  const Model* pretrained = nullptr;
  std::map<RequirementKind, const Model*> simft;
  const Model* ric = nullptr;
  std::optional<WeightGrid> rs_grid_2;
  std::optional<WeightGrid> rs_grid_3;
  std::optional<WeightGrid> ric_grid_2;
  std::optional<WeightGrid> ric_grid_3;
};

class MissingModel : public std::invalid_argument {
 public:
  explicit MissingModel(const std::string& what) : std::invalid_argument("missing model: " + what), name_(what) {}
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

struct CellResult {
  Method method = Method::e_simft;
  Scenario scenario;
  int budget = 0;
  std::vector<ParetoPoint> points;
  std::vector<std::size_t> front;  // indices into points
  double hypervolume = 0.0;
  int samples_used() const { return static_cast<int>(points.size()); }
};

namespace detail {

// One random stream per (cell, model slot, sample) shared by all methods, so
// methods that coincide also coincide sample-for-sample.
inline Rng cell_rng(std::uint64_t seed, std::uint64_t scenario_key, std::uint64_t problem_key, std::size_t slot,
                    int sample) {
  return derive_rng(seed, {stream_tag("cell"), scenario_key, problem_key, static_cast<std::uint64_t>(slot),
                           static_cast<std::uint64_t>(sample)});
}

inline std::uint64_t scenario_key(const Scenario& s) { return stream_tag(s.name()); }

/// Conditioning for a requirement-specialized model: the original targets
/// plus the bound of its own requirement when it has one.
inline Conditioning specialist_conditioning(const Problem& p, RequirementKind k) {
  Conditioning c = original_conditioning(p);
  if (k == RequirementKind::bbox) c.bbox_bound = p.bbox_bound;
  if (k == RequirementKind::cost) c.cost_bound = p.cost_bound;
  return c;
}

/// Original targets plus the bounds of the scenario's new requirements.
inline Conditioning scenario_conditioning(const Problem& p, const Scenario& sc) {
  Conditioning c = original_conditioning(p);
  if (sc.contains(RequirementKind::bbox)) c.bbox_bound = p.bbox_bound;
  if (sc.contains(RequirementKind::cost)) c.cost_bound = p.cost_bound;
  return c;
}

inline std::size_t kind_slot(RequirementKind k) { return static_cast<std::size_t>(k); }

}  // namespace detail

inline WeightGrid default_rs_grid(std::size_t k) {
  if (k == 2) return {{{0.0, 1.0}, {0.2, 0.8}, {0.4, 0.6}, {0.6, 0.4}, {0.8, 0.2}, {1.0, 0.0}}};
  if (k == 3) {
    const double w1[] = {0, 0, 0, 0.33, 0.5, 0.5, 1};
    const double w2[] = {0, 0.5, 1, 0.33, 0, 0.5, 0};
    WeightGrid g;
    for (int i = 0; i < 7; ++i) g.rows.push_back({w1[i], w2[i], 1.0 - w1[i] - w2[i]});
    return g;
  }
  throw std::invalid_argument("weight grids exist for 2 or 3 requirements");
}

inline WeightGrid default_ric_grid(std::size_t k) {
  if (k == 2) return {{{0, 1}, {1, 0}, {1, 1}}};
  if (k == 3) {
    const double w1[] = {0, 0, 1, 0, 1, 1, 1};
    const double w2[] = {0, 1, 0, 1, 0, 1, 1};
    const double w3[] = {1, 0, 0, 1, 1, 0, 1};
    WeightGrid g;
    for (int i = 0; i < 7; ++i) g.rows.push_back({w1[i], w2[i], w3[i]});
    return g;
  }
  throw std::invalid_argument("weight grids exist for 2 or 3 requirements");
}

/// Rows must be non-negative and sum to 1 (RS) or be binary and non-zero (RiC).
inline void check_weight_grid(const WeightGrid& g, std::size_t k, bool binary) {
  if (g.rows.empty()) throw std::invalid_argument("weight grid is empty");
  for (const auto& r : g.rows) {
    if (r.size() != k) throw std::invalid_argument("weight grid row has the wrong length");
    double sum = 0;
    for (double w : r) {
      if (binary ? (w != 0.0 && w != 1.0) : !(w >= 0.0)) throw std::invalid_argument("bad weight grid entry");
      sum += w;
    }
    if (binary ? sum == 0.0 : std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("bad weight grid row sum");
  }
}

/// Scenario-ordered preference weights laid out over all four requirements.
inline std::array<double, 4> expand_preference(const std::vector<double>& row, const Scenario& sc) {
  std::array<double, 4> out{0, 0, 0, 0};
  for (std::size_t i = 0; i < sc.size(); ++i) out[detail::kind_slot(sc.kinds[i])] = row[i];
  return out;
}

/// Samples requirement i's model at each epsilon of its schedule and scores
/// the designs against the unshifted problem.
inline std::vector<ParetoPoint> epsilon_sample(const Scenario& sc, const std::map<RequirementKind, const Model*>& models,
                                               const Problem& problem, std::uint64_t problem_key, int budget,
                                               const EvalConfig& cfg, bool apply_epsilon = true,
                                               const char* method = "e_simft", const char* model_prefix = "simft_") {
  const auto alloc = split_budget(budget, static_cast<int>(sc.size()));
  std::vector<ParetoPoint> out;
  for (std::size_t i = 0; i < sc.size(); ++i) {
    const RequirementKind k = sc.kinds[i];
    auto it = models.find(k);
    if (it == models.end() || it->second == nullptr) throw MissingModel(std::string(model_prefix) + std::string(kind_name(k)));
    const int n = alloc[i];
    if (n == 0) continue;
    const auto range = cfg.epsilon.range(k);
    const auto eps = apply_epsilon ? epsilon_schedule(range[0], range[1], n) : std::vector<double>(static_cast<std::size_t>(n), 0.0);
    for (int s = 0; s < n; ++s) {
      const double e = eps[static_cast<std::size_t>(s)];
      Problem shifted = problem;
      if (e != 0.0) shifted = shift_requirement(problem, k, e, cfg.epsilon);
      Rng rng = detail::cell_rng(cfg.seed, detail::scenario_key(sc), problem_key, detail::kind_slot(k), s);
      DesignSequence seq = sample(*it->second, detail::specialist_conditioning(shifted, k), cfg.sampling, rng);
      const SimulationResult r = simulate(seq, cfg.catalog);
      out.push_back({violation_vector(r, problem, sc, cfg.scales),
                     {method, std::string(model_prefix) + std::string(kind_name(k)), e, s},
                     std::move(seq)});
    }
  }
  return out;
}

namespace detail {

inline void finish_cell(CellResult& cell) {
  std::vector<std::vector<double>> v;
  for (const auto& p : cell.points) v.push_back(p.violations);
  cell.front = v.empty() ? std::vector<std::size_t>{} : non_dominated_indices(v);
  cell.hypervolume = hypervolume(v);
}

}  // namespace detail

inline CellResult run_method(Method method, const Scenario& sc, const Problem& problem, std::uint64_t problem_key,
                             int budget, const ModelBank& bank, const EvalConfig& cfg) {
  if (budget < static_cast<int>(sc.size())) throw std::invalid_argument("budget must be at least the scenario size");
  CellResult cell;
  cell.method = method;
  cell.scenario = sc;
  cell.budget = budget;
  const std::string mname(method_name(method));
  auto need = [](const Model* m, const char* name) {
    if (m == nullptr) throw MissingModel(name);
    return m;
  };
  auto score = [&](DesignSequence seq, const std::string& model, double eps, int s) {
    const SimulationResult r = simulate(seq, cfg.catalog);
    cell.points.push_back({violation_vector(r, problem, sc, cfg.scales), {mname, model, eps, s}, std::move(seq)});
  };

  switch (method) {
    case Method::baseline_random: {
      const Model* m = need(bank.pretrained, "pretrained");
      for (int s = 0; s < budget; ++s) {
        Rng rng = detail::cell_rng(cfg.seed, detail::scenario_key(sc), problem_key, 100, s);
        score(sample(*m, original_conditioning(problem), cfg.sampling, rng), "pretrained", 0.0, s);
      }
      break;
    }
    case Method::e_simft:
    case Method::simft_only:
      cell.points = epsilon_sample(sc, bank.simft, problem, problem_key, budget, cfg, method == Method::e_simft,
                                   mname.c_str());
      break;
    case Method::epsilon_only: {
      // The pre-trained model only reads original targets, so shifts of a new
      // requirement's bound leave its conditioning unchanged.
      const Model* m = need(bank.pretrained, "pretrained");
      const auto alloc = split_budget(budget, static_cast<int>(sc.size()));
      for (std::size_t i = 0; i < sc.size(); ++i) {
        const RequirementKind k = sc.kinds[i];
        const auto range = cfg.epsilon.range(k);
        if (alloc[i] == 0) continue;
        const auto eps = epsilon_schedule(range[0], range[1], alloc[i]);
        for (int s = 0; s < alloc[i]; ++s) {
          const double e = eps[static_cast<std::size_t>(s)];
          const Problem shifted = is_original(k) ? shift_requirement(problem, k, e, cfg.epsilon) : problem;
          Rng rng = detail::cell_rng(cfg.seed, detail::scenario_key(sc), problem_key, detail::kind_slot(k), s);
          score(sample(*m, original_conditioning(shifted), cfg.sampling, rng), "pretrained", e, s);
        }
      }
      break;
    }
    case Method::rewarded_soup: {
      WeightGrid grid = sc.size() == 2 ? bank.rs_grid_2.value_or(default_rs_grid(2)) : bank.rs_grid_3.value_or(default_rs_grid(3));
      check_weight_grid(grid, sc.size(), false);
      std::vector<const ModelParameters<float>*> members;
      for (auto k : sc.kinds) {
        auto it = bank.simft.find(k);
        if (it == bank.simft.end() || it->second == nullptr) throw MissingModel("simft_" + std::string(kind_name(k)));
        members.push_back(&it->second->parameters());
      }
      const auto alloc = split_budget(budget, static_cast<int>(grid.size()));
      for (std::size_t r = 0; r < grid.size(); ++r) {
        if (alloc[r] == 0) continue;
        const Model soup(interpolate_parameters<float>(members, grid.rows[r]));
        for (int s = 0; s < alloc[r]; ++s) {
          Rng rng = detail::cell_rng(cfg.seed, detail::scenario_key(sc), problem_key, 200 + r, s);
          score(sample(soup, detail::scenario_conditioning(problem, sc), cfg.sampling, rng), "rs_row" + std::to_string(r),
                0.0, s);
        }
      }
      break;
    }
    case Method::ric: {
      const Model* m = need(bank.ric, "ric");
      WeightGrid grid = sc.size() == 2 ? bank.ric_grid_2.value_or(default_ric_grid(2)) : bank.ric_grid_3.value_or(default_ric_grid(3));
      check_weight_grid(grid, sc.size(), true);
      const auto alloc = split_budget(budget, static_cast<int>(grid.size()));
      for (std::size_t r = 0; r < grid.size(); ++r) {
        Conditioning c = full_conditioning(problem);
        c.preference = expand_preference(grid.rows[r], sc);
        for (int s = 0; s < alloc[r]; ++s) {
          Rng rng = detail::cell_rng(cfg.seed, detail::scenario_key(sc), problem_key, 300 + r, s);
          score(sample(*m, c, cfg.sampling, rng), "ric_row" + std::to_string(r), 0.0, s);
        }
      }
      break;
    }
  }
  detail::finish_cell(cell);
  return cell;
}

// ---------------------------------------------------------------------------
// Cell persistence

inline json cell_to_json(const CellResult& c, int problem_index) {
  json pts = json::array();
  for (const auto& p : c.points)
    pts.push_back({{"violations", p.violations},
                   {"method", p.source.method},
                   {"model", p.source.model},
                   {"epsilon", p.source.epsilon},
                   {"sample", p.source.sample_index},
                   {"tokens", to_ids(p.sequence)}});
  return {{"method", method_name(c.method)},
          {"scenario", c.scenario.name()},
          {"problem_index", problem_index},
          {"budget", c.budget},
          {"samples_used", c.samples_used()},
          {"points", pts},
          {"front", c.front},
          {"hypervolume", c.hypervolume}};
}

inline CellResult cell_from_json(const json& j) {
  CellResult c;
  c.method = parse_method(j.at("method").get<std::string>());
  c.scenario = parse_scenario(j.at("scenario").get<std::string>());
  c.budget = j.at("budget").get<int>();
  for (const auto& p : j.at("points"))
    c.points.push_back({p.at("violations").get<std::vector<double>>(),
                        {p.at("method").get<std::string>(), p.at("model").get<std::string>(), p.at("epsilon").get<double>(),
                         p.at("sample").get<int>()},
                        from_ids(p.at("tokens").get<std::vector<int>>())});
  c.front = j.at("front").get<std::vector<std::size_t>>();
  c.hypervolume = j.at("hypervolume").get<double>();
  return c;
}

}  // namespace esimft
