#pragma once

// Experiment configuration: a JSON document validated against the published
// schema (config/config.schema.json) and unknown keys rejected.

#include <cstdlib>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "esimft/finetune.hpp"
#include "esimft/io.hpp"
#include "esimft/pareto_eval.hpp"

namespace esimft {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Schema

inline const char* config_schema_text() {
  return R"json({
  "$schema": "http://json-schema.org/draft-07/schema#",
  "title": "esimft experiment configuration",
  "type": "object",
  "additionalProperties": false,
  "$defs": {
    "training": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "learning_rate": {"type": "number", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "max_epochs": {"type": "integer", "minimum": 0},
        "beta_kl": {"type": "number", "minimum": 0},
        "clip_epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "reward_mode": {"type": "string", "enum": ["continuous", "binary"]},
        "adam_beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_eps": {"type": "number", "exclusiveMinimum": 0},
        "rollouts_per_epoch": {"type": "integer", "minimum": 1}
      }
    },
    "grid": {
      "type": "array",
      "minItems": 1,
      "items": {"type": "array", "items": {"type": "number", "minimum": 0}}
    }
  },
  "properties": {
    "seed": {"type": "integer", "minimum": 0},
    "output_dir": {"type": "string"},
    "data": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "pretrain_size": {"type": "integer", "minimum": 10},
        "finetune_size": {"type": "integer", "minimum": 40},
        "max_stages": {"type": "integer", "minimum": 1, "maximum": 20}
      }
    },
    "catalog": {
      "type": "array",
      "minItems": 6,
      "maxItems": 6,
      "items": {
        "type": "object",
        "additionalProperties": false,
        "required": ["driver_teeth", "driven_teeth", "axis_effect", "price"],
        "properties": {
          "driver_teeth": {"type": "integer", "minimum": 8},
          "driven_teeth": {"type": "integer", "minimum": 8},
          "axis_effect": {"type": "string", "enum": ["parallel", "perpendicular"]},
          "price": {"type": "number", "exclusiveMinimum": 0},
          "gear_radius_per_tooth": {"type": "number", "exclusiveMinimum": 0}
        }
      }
    },
    "scales": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "speed": {"type": "number", "exclusiveMinimum": 0},
        "position": {"type": "number", "exclusiveMinimum": 0},
        "bbox": {"type": "number", "exclusiveMinimum": 0},
        "cost": {"type": "number", "exclusiveMinimum": 0}
      }
    },
    "tolerances": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "speed": {"type": "number", "exclusiveMinimum": 0},
        "position": {"type": "number", "exclusiveMinimum": 0}
      }
    },
    "model": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "d_model": {"type": "integer", "minimum": 1},
        "encoder_layers": {"type": "integer", "minimum": 0},
        "decoder_layers": {"type": "integer", "minimum": 1},
        "heads": {"type": "integer", "minimum": 1},
        "ff_width": {"type": "integer", "minimum": 1}
      }
    },
    "sampling": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "temperature": {"type": "number", "exclusiveMinimum": 0}
      }
    },
    "finetune_data": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "max_draws_per_problem": {"type": "integer", "minimum": 1},
        "slack_fraction": {"type": "number", "minimum": 0}
      }
    },
    "training": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "pretrain": {"$ref": "#/$defs/training"},
        "sft_original": {"$ref": "#/$defs/training"},
        "sft_new": {"$ref": "#/$defs/training"},
        "dpo": {"$ref": "#/$defs/training"},
        "ppo": {"$ref": "#/$defs/training"},
        "ric": {"$ref": "#/$defs/training"}
      }
    },
    "probe": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "problems": {"type": "integer", "minimum": 1},
        "samples": {"type": "integer", "minimum": 1},
        "validity_threshold": {"type": "number", "minimum": 0, "maximum": 1}
      }
    },
    "epsilon": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "speed_unit": {"type": "number", "minimum": 0},
        "position_unit": {"type": "number", "minimum": 0},
        "bbox_unit": {"type": "number", "minimum": 0},
        "cost_unit": {"type": "number", "minimum": 0},
        "equality_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "inequality_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
      }
    },
    "evaluation": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "test_problems": {"type": "integer", "minimum": 1},
        "bound_percentile": {"type": "number", "minimum": 0, "maximum": 100},
        "budgets": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 3}},
        "scenarios": {"type": "array", "items": {"type": "string"}},
        "methods": {
          "type": "array",
          "items": {"type": "string", "enum": ["baseline_random", "rewarded_soup", "ric", "simft_only", "epsilon_only", "e_simft"]}
        },
        "new_requirement_stage": {"type": "string", "enum": ["sft", "dpo", "ppo"]},
        "rs_grid_2": {"$ref": "#/$defs/grid"},
        "rs_grid_3": {"$ref": "#/$defs/grid"},
        "ric_grid_2": {"$ref": "#/$defs/grid"},
        "ric_grid_3": {"$ref": "#/$defs/grid"}
      }
    },
    "verbose": {"type": "boolean"}
  }
})json";
}

inline const json& config_schema() {
  static const json schema = json::parse(config_schema_text());
  return schema;
}

namespace detail {

inline bool schema_type_matches(const json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "integer") return v.is_number_integer() || (v.is_number_float() && v.get<double>() == std::floor(v.get<double>()));
  if (type == "number") return v.is_number();
  return false;
}

// The subset of JSON Schema draft-07 that the published schema uses.
inline void validate_schema_node(const json& v, const json& schema, const json& root, const std::string& where) {
  if (schema.contains("$ref")) {
    const std::string ref = schema.at("$ref");
    const std::string prefix = "#/$defs/";
    if (ref.rfind(prefix, 0) != 0) throw std::logic_error("unsupported $ref " + ref);
    validate_schema_node(v, root.at("$defs").at(ref.substr(prefix.size())), root, where);
    return;
  }
  auto fail = [&](const std::string& what) { throw ConfigError(where + ": " + what); };
  if (schema.contains("type") && !schema_type_matches(v, schema.at("type"))) fail("expected " + schema.at("type").get<std::string>());
  if (schema.contains("enum")) {
    bool found = false;
    for (const auto& e : schema.at("enum")) found = found || e == v;
    if (!found) fail("value " + v.dump() + " not allowed");
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (schema.contains("minimum") && x < schema.at("minimum").get<double>()) fail("below minimum");
    if (schema.contains("maximum") && x > schema.at("maximum").get<double>()) fail("above maximum");
    if (schema.contains("exclusiveMinimum") && x <= schema.at("exclusiveMinimum").get<double>()) fail("must exceed minimum");
    if (schema.contains("exclusiveMaximum") && x >= schema.at("exclusiveMaximum").get<double>()) fail("must stay below maximum");
  }
  if (v.is_object()) {
    const json props = schema.value("properties", json::object());
    for (const auto& [key, val] : v.items()) {
      if (props.contains(key)) validate_schema_node(val, props.at(key), root, where + "." + key);
      else if (schema.contains("additionalProperties") && schema.at("additionalProperties") == false)
        fail("unknown key '" + key + "'");
    }
    for (const auto& r : schema.value("required", json::array()))
      if (!v.contains(r.get<std::string>())) fail("missing required key '" + r.get<std::string>() + "'");
  }
  if (v.is_array()) {
    if (schema.contains("minItems") && v.size() < schema.at("minItems").get<std::size_t>()) fail("too few items");
    if (schema.contains("maxItems") && v.size() > schema.at("maxItems").get<std::size_t>()) fail("too many items");
    if (schema.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i)
        validate_schema_node(v[i], schema.at("items"), root, where + "[" + std::to_string(i) + "]");
  }
}

}  // namespace detail

inline void validate_config_json(const json& j) { detail::validate_schema_node(j, config_schema(), config_schema(), "config"); }

// ---------------------------------------------------------------------------
// Typed configuration

struct StageConfigs {
  TrainingConfig pretrain, sft_original, sft_new, dpo, ppo, ric;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  int pretrain_size = 20000;
  int finetune_size = 2000;
  int max_stages = kMaxStages;
  GearCatalog catalog = default_catalog();
  ViolationScales scales;
  Tolerances tolerances;
  Architecture model;
  SamplingConfig sampling;
  int max_draws_per_problem = 8;
  double slack_fraction = 0.5;
  StageConfigs training;
  int probe_problems = 64;
  int probe_samples = 1;
  double validity_threshold = 0.95;
  EpsilonSettings epsilon;
  int test_problems = 30;
  double bound_percentile = 40.0;
  std::vector<int> budgets{30};
  std::vector<Scenario> scenarios = enumerate_scenarios();
  std::vector<Method> methods{kAllMethods.begin(), kAllMethods.end()};
  std::string new_requirement_stage = "dpo";
  std::optional<WeightGrid> rs_grid_2, rs_grid_3, ric_grid_2, ric_grid_3;
  bool verbose = false;

  ExperimentConfig() {
    training.pretrain.learning_rate = 1e-3;
    training.pretrain.adam_beta1 = 0.9;
    training.pretrain.max_epochs = 15;
    training.pretrain.freeze_policy = FreezePolicy::all_trainable;

    training.sft_original.learning_rate = 3e-4;
    training.sft_original.adam_beta1 = 0.9;
    training.sft_original.max_epochs = 30;
    training.sft_original.freeze_policy = FreezePolicy::decoder_only;

    training.sft_new.learning_rate = 1e-4;
    training.sft_new.max_epochs = 10;
    training.sft_new.freeze_policy = FreezePolicy::decoder_and_new_encoder;

    training.dpo.learning_rate = 1e-5;
    training.dpo.max_epochs = 20;
    training.dpo.beta_kl = 0.1;
    training.dpo.freeze_policy = FreezePolicy::decoder_only;

    training.ppo.learning_rate = 1e-4;
    training.ppo.max_epochs = 20;
    training.ppo.beta_kl = 0.1;
    training.ppo.clip_epsilon = 0.2;
    training.ppo.freeze_policy = FreezePolicy::decoder_and_new_encoder;

    training.ric.learning_rate = 1e-4;
    training.ric.max_epochs = 10;
    training.ric.freeze_policy = FreezePolicy::decoder_and_aux_encoders;
  }

  fs::path out() const { return fs::path(output_dir); }
};

namespace detail {

inline void read_training(const json& j, TrainingConfig& t) {
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.max_epochs = j.value("max_epochs", t.max_epochs);
  t.beta_kl = j.value("beta_kl", t.beta_kl);
  t.clip_epsilon = j.value("clip_epsilon", t.clip_epsilon);
  t.adam_beta1 = j.value("adam_beta1", t.adam_beta1);
  t.adam_beta2 = j.value("adam_beta2", t.adam_beta2);
  t.adam_eps = j.value("adam_eps", t.adam_eps);
  t.rollouts_per_epoch = j.value("rollouts_per_epoch", t.rollouts_per_epoch);
  if (j.contains("reward_mode"))
    t.reward_mode = j.at("reward_mode") == "binary" ? RewardMode::binary : RewardMode::continuous;
}

inline json training_to_json(const TrainingConfig& t) {
  return {{"learning_rate", t.learning_rate}, {"batch_size", t.batch_size},   {"max_epochs", t.max_epochs},
          {"beta_kl", t.beta_kl},             {"clip_epsilon", t.clip_epsilon}, {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},       {"adam_eps", t.adam_eps},         {"rollouts_per_epoch", t.rollouts_per_epoch},
          {"reward_mode", t.reward_mode == RewardMode::binary ? "binary" : "continuous"}};
}

inline WeightGrid read_grid(const json& j) {
  WeightGrid g;
  for (const auto& r : j) g.rows.push_back(r.get<std::vector<double>>());
  return g;
}

}  // namespace detail

/// Parses and validates a configuration document. ESIMFT_SEED, when set,
/// overrides the seed.
inline ExperimentConfig config_from_json(const json& j) {
  validate_config_json(j);
  ExperimentConfig c;
  c.seed = j.value("seed", c.seed);
  c.output_dir = j.value("output_dir", c.output_dir);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    c.pretrain_size = d.value("pretrain_size", c.pretrain_size);
    c.finetune_size = d.value("finetune_size", c.finetune_size);
    c.max_stages = d.value("max_stages", c.max_stages);
  }
  if (j.contains("catalog")) {
    GearCatalog cat;
    for (const auto& e : j.at("catalog")) {
      GearCatalogEntry g;
      g.catalog_id = static_cast<int>(cat.size());
      g.driver_teeth = e.at("driver_teeth");
      g.driven_teeth = e.at("driven_teeth");
      g.axis_effect = e.at("axis_effect") == "perpendicular" ? AxisEffect::perpendicular : AxisEffect::parallel;
      g.price = e.at("price");
      g.gear_radius_per_tooth = e.value("gear_radius_per_tooth", g.gear_radius_per_tooth);
      cat.push_back(g);
    }
    check_catalog(cat);
    c.catalog = cat;
  }
  if (j.contains("scales")) {
    const auto& s = j.at("scales");
    c.scales.speed = s.value("speed", c.scales.speed);
    c.scales.position = s.value("position", c.scales.position);
    c.scales.bbox = s.value("bbox", c.scales.bbox);
    c.scales.cost = s.value("cost", c.scales.cost);
  }
  if (j.contains("tolerances")) {
    c.tolerances.speed = j.at("tolerances").value("speed", c.tolerances.speed);
    c.tolerances.position = j.at("tolerances").value("position", c.tolerances.position);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    c.model.d_model = m.value("d_model", c.model.d_model);
    c.model.encoder_layers = m.value("encoder_layers", c.model.encoder_layers);
    c.model.decoder_layers = m.value("decoder_layers", c.model.decoder_layers);
    c.model.heads = m.value("heads", c.model.heads);
    c.model.ff_width = m.value("ff_width", c.model.ff_width);
  }
  c.model.bbox_bound_scale = c.scales.bbox;
  c.model.cost_bound_scale = c.scales.cost;
  try {
    c.model.check();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config.model: ") + e.what());
  }
  if (j.contains("sampling")) c.sampling.temperature = j.at("sampling").value("temperature", c.sampling.temperature);
  if (j.contains("finetune_data")) {
    c.max_draws_per_problem = j.at("finetune_data").value("max_draws_per_problem", c.max_draws_per_problem);
    c.slack_fraction = j.at("finetune_data").value("slack_fraction", c.slack_fraction);
  }
  if (j.contains("training")) {
    const auto& t = j.at("training");
    const std::pair<const char*, TrainingConfig*> stages[] = {
        {"pretrain", &c.training.pretrain}, {"sft_original", &c.training.sft_original}, {"sft_new", &c.training.sft_new},
        {"dpo", &c.training.dpo},           {"ppo", &c.training.ppo},                   {"ric", &c.training.ric}};
    for (auto [name, cfg] : stages)
      if (t.contains(name)) detail::read_training(t.at(name), *cfg);
  }
  if (j.contains("probe")) {
    const auto& p = j.at("probe");
    c.probe_problems = p.value("problems", c.probe_problems);
    c.probe_samples = p.value("samples", c.probe_samples);
    c.validity_threshold = p.value("validity_threshold", c.validity_threshold);
  }
  if (j.contains("epsilon")) {
    const auto& e = j.at("epsilon");
    c.epsilon.speed_unit = e.value("speed_unit", c.epsilon.speed_unit);
    c.epsilon.position_unit = e.value("position_unit", c.epsilon.position_unit);
    c.epsilon.bbox_unit = e.value("bbox_unit", c.epsilon.bbox_unit);
    c.epsilon.cost_unit = e.value("cost_unit", c.epsilon.cost_unit);
    if (e.contains("equality_range")) c.epsilon.equality_range = e.at("equality_range").get<std::array<double, 2>>();
    if (e.contains("inequality_range")) c.epsilon.inequality_range = e.at("inequality_range").get<std::array<double, 2>>();
    for (const auto& r : {c.epsilon.equality_range, c.epsilon.inequality_range})
      if (!(r[0] <= r[1])) throw ConfigError("config.epsilon: range must satisfy lo <= hi");
  }
  if (j.contains("evaluation")) {
    const auto& e = j.at("evaluation");
    c.test_problems = e.value("test_problems", c.test_problems);
    c.bound_percentile = e.value("bound_percentile", c.bound_percentile);
    if (e.contains("budgets")) c.budgets = e.at("budgets").get<std::vector<int>>();
    if (e.contains("scenarios")) {
      c.scenarios.clear();
      for (const auto& s : e.at("scenarios")) {
        try {
          c.scenarios.push_back(parse_scenario(s.get<std::string>()));
        } catch (const std::invalid_argument& ex) {
          throw ConfigError(std::string("config.evaluation.scenarios: ") + ex.what());
        }
      }
    }
    if (e.contains("methods")) {
      c.methods.clear();
      for (const auto& m : e.at("methods")) c.methods.push_back(parse_method(m.get<std::string>()));
    }
    c.new_requirement_stage = e.value("new_requirement_stage", c.new_requirement_stage);
    auto grid = [&](const char* key, std::optional<WeightGrid>& dst, std::size_t k, bool binary) {
      if (!e.contains(key)) return;
      dst = detail::read_grid(e.at(key));
      try {
        check_weight_grid(*dst, k, binary);
      } catch (const std::invalid_argument& ex) {
        throw ConfigError(std::string("config.evaluation.") + key + ": " + ex.what());
      }
    };
    grid("rs_grid_2", c.rs_grid_2, 2, false);
    grid("rs_grid_3", c.rs_grid_3, 3, false);
    grid("ric_grid_2", c.ric_grid_2, 2, true);
    grid("ric_grid_3", c.ric_grid_3, 3, true);
  }
  c.verbose = j.value("verbose", c.verbose);
  if (const char* env = std::getenv("ESIMFT_SEED"); env != nullptr && *env != '\0') {
    try {
      std::size_t used = 0;
      c.seed = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError(std::string("ESIMFT_SEED is not a non-negative integer: ") + env);
    }
  }
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

/// The effective configuration (all defaults filled in).
inline json config_to_json(const ExperimentConfig& c) {
  json cat = json::array();
  for (const auto& g : c.catalog)
    cat.push_back({{"driver_teeth", g.driver_teeth},
                   {"driven_teeth", g.driven_teeth},
                   {"axis_effect", g.axis_effect == AxisEffect::perpendicular ? "perpendicular" : "parallel"},
                   {"price", g.price},
                   {"gear_radius_per_tooth", g.gear_radius_per_tooth}});
  json scenarios = json::array();
  for (const auto& s : c.scenarios) scenarios.push_back(s.name());
  json methods = json::array();
  for (auto m : c.methods) methods.push_back(method_name(m));
  json eval = {{"test_problems", c.test_problems},
               {"bound_percentile", c.bound_percentile},
               {"budgets", c.budgets},
               {"scenarios", scenarios},
               {"methods", methods},
               {"new_requirement_stage", c.new_requirement_stage}};
  auto grid = [&](const char* key, const std::optional<WeightGrid>& g) {
    if (g) eval[key] = g->rows;
  };
  grid("rs_grid_2", c.rs_grid_2);
  grid("rs_grid_3", c.rs_grid_3);
  grid("ric_grid_2", c.ric_grid_2);
  grid("ric_grid_3", c.ric_grid_3);
  return {{"seed", c.seed},
          {"output_dir", c.output_dir},
          {"data", {{"pretrain_size", c.pretrain_size}, {"finetune_size", c.finetune_size}, {"max_stages", c.max_stages}}},
          {"catalog", cat},
          {"scales", {{"speed", c.scales.speed}, {"position", c.scales.position}, {"bbox", c.scales.bbox}, {"cost", c.scales.cost}}},
          {"tolerances", {{"speed", c.tolerances.speed}, {"position", c.tolerances.position}}},
          {"model",
           {{"d_model", c.model.d_model},
            {"encoder_layers", c.model.encoder_layers},
            {"decoder_layers", c.model.decoder_layers},
            {"heads", c.model.heads},
            {"ff_width", c.model.ff_width}}},
          {"sampling", {{"temperature", c.sampling.temperature}}},
          {"finetune_data", {{"max_draws_per_problem", c.max_draws_per_problem}, {"slack_fraction", c.slack_fraction}}},
          {"training",
           {{"pretrain", detail::training_to_json(c.training.pretrain)},
            {"sft_original", detail::training_to_json(c.training.sft_original)},
            {"sft_new", detail::training_to_json(c.training.sft_new)},
            {"dpo", detail::training_to_json(c.training.dpo)},
            {"ppo", detail::training_to_json(c.training.ppo)},
            {"ric", detail::training_to_json(c.training.ric)}}},
          {"probe", {{"problems", c.probe_problems}, {"samples", c.probe_samples}, {"validity_threshold", c.validity_threshold}}},
          {"epsilon",
           {{"speed_unit", c.epsilon.speed_unit},
            {"position_unit", c.epsilon.position_unit},
            {"bbox_unit", c.epsilon.bbox_unit},
            {"cost_unit", c.epsilon.cost_unit},
            {"equality_range", c.epsilon.equality_range},
            {"inequality_range", c.epsilon.inequality_range}}},
          {"evaluation", eval},
          {"verbose", c.verbose}};
}

}  // namespace esimft
