#pragma once

// Rewarded Soup (parameter interpolation of requirement-specialized models)
// and Rewards-in-Context (preference-conditioned fine-tuning).

#include <vector>

#include "esimft/finetune.hpp"
#include "esimft/pareto_eval.hpp"

namespace esimft {

/// One interpolated parameter set per grid row.
template <class T>
std::vector<ModelParameters<T>> rewarded_soup_models(const std::vector<const ModelParameters<T>*>& models,
                                                     const WeightGrid& grid) {
  check_weight_grid(grid, models.size(), false);
  std::vector<ModelParameters<T>> out;
  out.reserve(grid.size());
  for (const auto& row : grid.rows) out.push_back(interpolate_parameters<T>(models, row));
  return out;
}

/// Which of the four requirements a simulated design meets for a problem.
/// Equality kinds use the tolerances, inequality kinds the problem's bounds.
inline std::array<double, 4> met_vector(const SimulationResult& r, const Problem& p, const Tolerances& tol,
                                        const ViolationScales& scales = {}) {
  std::array<double, 4> out{0, 0, 0, 0};
  for (auto k : kAllRequirementKinds) {
    if (!is_original(k) && !p.bound(k)) continue;
    out[static_cast<std::size_t>(k)] = meets(r, p, k, tol, scales) ? 1.0 : 0.0;
  }
  return out;
}

/// One pre-trained sample per problem (with up to 10 redraws for validity),
/// labeled with the met vector as its preference conditioning. Problems
/// without bounds get their own ground-truth values as bounds.
template <class T>
std::vector<LabeledExample> ric_build_dataset(const ConditionalSequenceModel<T>& pretrained,
                                              const std::vector<LabeledExample>& source, std::uint64_t seed,
                                              const GearCatalog& catalog, const Tolerances& tol = {},
                                              const ViolationScales& scales = {}, const SamplingConfig& cfg = {}) {
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < source.size(); ++i) {
    Problem p = source[i].problem;
    if (!p.bbox_bound) p.bbox_bound = source[i].metrics.bbox_volume;
    if (!p.cost_bound) p.cost_bound = source[i].metrics.cost;
    Rng rng = derive_rng(seed, {stream_tag("ric-data"), static_cast<std::uint64_t>(i)});
    auto s = sample_valid(pretrained, original_conditioning(p), cfg, rng, catalog);
    if (!s) continue;
    LabeledExample e{p, std::move(s->sequence), s->metrics, met_vector(s->metrics, p, tol, scales)};
    out.push_back(std::move(e));
  }
  return out;
}

/// Fine-tunes on requirements plus preference vector with the original
/// encoder frozen; the decoder and both auxiliary encoders train.
template <class T>
TrainingResult<T> ric_train(ConditionalSequenceModel<T> model, const std::vector<LabeledExample>& train,
                            const std::vector<LabeledExample>& val, TrainingConfig cfg, const Probe<T>& probe = {},
                            bool verbose = false) {
  cfg.freeze_policy = FreezePolicy::decoder_and_aux_encoders;
  for (const auto* set : {&train, &val})
    for (const auto& e : *set)
      if (!e.preference) throw std::invalid_argument("RiC examples need a preference vector");
  return supervised_train(std::move(model), train, val, cfg, LossNormalization::per_sequence, probe, "ric", verbose);
}

}  // namespace esimft
