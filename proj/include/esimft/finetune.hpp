#pragma once

// Training loops: pre-training, supervised fine-tuning, DPO and PPO with
// simulator rewards, plus post-hoc checkpoint selection.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "esimft/dataset_gen.hpp"
#include "esimft/seq_model.hpp"

namespace esimft {

struct TrainingConfig {
  double learning_rate = 1e-3;
  int batch_size = 64;
  int max_epochs = 10;
  double beta_kl = 0.1;
  double clip_epsilon = 0.2;
  std::uint64_t seed = 0;
  FreezePolicy freeze_policy = FreezePolicy::all_trainable;
  RewardMode reward_mode = RewardMode::continuous;
  // Adaptive-moment stepping; beta1 = 0 disables the momentum term.
  double adam_beta1 = 0.0;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // PPO only.
  int rollouts_per_epoch = 256;

  void check() const {
    if (!(learning_rate >= 0)) throw std::invalid_argument("learning_rate must be non-negative");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (max_epochs < 0) throw std::invalid_argument("max_epochs must be >= 0");
    if (!(beta_kl >= 0)) throw std::invalid_argument("beta_kl must be >= 0");
    if (!(clip_epsilon > 0 && clip_epsilon < 1)) throw std::invalid_argument("clip_epsilon must be in (0, 1)");
    if (rollouts_per_epoch < 1) throw std::invalid_argument("rollouts_per_epoch must be >= 1");
  }
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Optimizer

template <class T>
class Adam {
 public:
  Adam(const ModelParameters<T>& params, double beta1, double beta2, double eps)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& t : params) {
      m_.emplace_back(t.value.size(), 0.0);
      v_.emplace_back(t.value.size(), 0.0);
    }
  }

  /// grads[i] may be empty (no gradient reached tensor i). Masked-out tensors
  /// are never touched.
  void step(ModelParameters<T>& params, const std::vector<const Matrix<T>*>& grads, const std::vector<bool>& mask,
            double lr) {
    ++t_;
    if (lr == 0.0) return;
    const double c1 = beta1_ > 0 ? 1.0 - std::pow(beta1_, static_cast<double>(t_)) : 1.0;
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!mask[i] || grads[i] == nullptr || grads[i]->empty()) continue;
      auto& w = params[i].value.data;
      const auto& g = grads[i]->data;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = static_cast<double>(g[k]);
        m[k] = beta1_ * m[k] + (1.0 - beta1_) * gk;
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
        const double update = lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
        w[k] = static_cast<T>(static_cast<double>(w[k]) - update);
      }
    }
  }

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// History

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double metric = 0;    // mean violation or %-met on the probe set
  double validity = 0;  // fraction of grammar-valid probe samples
  std::string checkpoint;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  std::string metric_name;

  std::vector<double> validity_series() const {
    std::vector<double> v;
    for (const auto& e : epochs) v.push_back(e.validity);
    return v;
  }
};

inline std::string history_csv(const TrainingHistory& h) {
  std::string out = "epoch,train_loss,val_loss,metric,validity\n";
  char buf[160];
  for (const auto& e : h.epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.8g,%.8g,%.8g,%.6f\n", e.epoch, e.train_loss, e.val_loss, e.metric, e.validity);
    out += buf;
  }
  return out;
}

struct ProbeResult {
  double metric = 0;
  double validity = 0;
};

template <class T>
using Probe = std::function<ProbeResult(const ConditionalSequenceModel<T>&)>;

struct CheckpointChoice {
  int epoch = 0;  // 1-based
  bool met_threshold = true;
};

/// Best metric among epochs whose validity reaches the threshold; otherwise the
/// most valid epoch (with a warning).
inline CheckpointChoice select_checkpoint(const TrainingHistory& h, double validity_threshold = 0.95,
                                          bool higher_is_better = true) {
  if (h.epochs.empty()) throw std::invalid_argument("empty training history");
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < h.epochs.size(); ++i) {
    if (h.epochs[i].validity < validity_threshold) continue;
    const double m = h.epochs[i].metric;
    if (!best) best = i;
    else if (higher_is_better ? m > h.epochs[*best].metric : m < h.epochs[*best].metric) best = i;
  }
  if (best) return {h.epochs[*best].epoch, true};
  std::size_t most_valid = 0;
  for (std::size_t i = 1; i < h.epochs.size(); ++i)
    if (h.epochs[i].validity > h.epochs[most_valid].validity) most_valid = i;
  std::cerr << "warning: no epoch reaches validity " << validity_threshold << "; selecting most valid epoch "
            << h.epochs[most_valid].epoch << "\n";
  return {h.epochs[most_valid].epoch, false};
}

// ---------------------------------------------------------------------------
// Supervised training (pre-training, SFT, RiC)

enum class LossNormalization : std::uint8_t {
  per_token,     // token-level cross-entropy
  per_sequence,  // mean of per-example -log pi(x | c)
};

inline Conditioning example_conditioning(const LabeledExample& e) {
  Conditioning c = full_conditioning(e.problem);
  c.preference = e.preference;
  return c;
}

inline std::size_t scored_tokens(const DesignSequence& s) { return s.empty() ? 0 : s.size() - 1; }

namespace detail {

template <class T>
std::vector<const Matrix<T>*> collect_grads(const Graph<T>& g, const std::vector<typename Graph<T>::Var>& vars) {
  std::vector<const Matrix<T>*> out;
  out.reserve(vars.size());
  for (auto v : vars) out.push_back(g.requires_grad(v) ? &g.grad(v) : nullptr);
  return out;
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = derive_rng(seed, {stream_tag("shuffle"), epoch});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

inline void check_finite(double loss, int epoch, const char* what) {
  if (!std::isfinite(loss))
    throw TrainingDiverged(std::string(what) + ": non-finite loss at epoch " + std::to_string(epoch));
}

}  // namespace detail

/// Mean supervised loss over a dataset under the given normalization.
template <class T>
double supervised_loss(const ConditionalSequenceModel<T>& model, const std::vector<LabeledExample>& data,
                       LossNormalization norm) {
  if (data.empty()) return 0.0;
  double total = 0;
  std::size_t tokens = 0;
  for (const auto& e : data) {
    total -= sequence_log_prob(model, example_conditioning(e), e.sequence);
    tokens += scored_tokens(e.sequence);
  }
  return norm == LossNormalization::per_token ? total / static_cast<double>(tokens)
                                              : total / static_cast<double>(data.size());
}

template <class T>
struct TrainingResult {
  ModelParameters<T> parameters;
  TrainingHistory history;
  int best_epoch = 0;
};

/// Minibatch training of -log pi(x | c) with early stopping at the first
/// epoch whose validation loss rises. Returns the best-validation parameters.
template <class T>
TrainingResult<T> supervised_train(ConditionalSequenceModel<T> model, const std::vector<LabeledExample>& train,
                                   const std::vector<LabeledExample>& val, const TrainingConfig& cfg,
                                   LossNormalization norm, const Probe<T>& probe = {}, const char* stage = "sft",
                                   bool verbose = false) {
  cfg.check();
  model.set_freeze(cfg.freeze_policy);
  Adam<T> opt(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  TrainingResult<T> result{model.parameters(), {}, 0};
  double best_val = std::numeric_limits<double>::infinity();
  double prev_val = std::numeric_limits<double>::infinity();

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto order = detail::shuffled_indices(train.size(), cfg.seed, static_cast<std::uint64_t>(epoch));
    double epoch_loss = 0;
    std::size_t epoch_norm = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::size_t denom = 0;
      for (std::size_t i = start; i < stop; ++i)
        denom += norm == LossNormalization::per_token ? scored_tokens(train[order[i]].sequence) : 1;
      Graph<T> g;
      auto vars = model.bind(g, true);
      std::vector<std::pair<typename Graph<T>::Var, T>> seeds;
      double batch_loss = 0;
      for (std::size_t i = start; i < stop; ++i) {
        const auto& e = train[order[i]];
        auto lp = model.log_prob(g, vars, example_conditioning(e), e.sequence);
        batch_loss -= static_cast<double>(g.value(lp).data[0]);
        seeds.push_back({lp, static_cast<T>(-1.0 / static_cast<double>(denom))});
      }
      detail::check_finite(batch_loss, epoch, stage);
      g.backward(seeds);
      opt.step(model.parameters(), detail::collect_grads(g, vars), model.trainable_mask(), cfg.learning_rate);
      epoch_loss += batch_loss;
      epoch_norm += denom;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_norm ? epoch_loss / static_cast<double>(epoch_norm) : 0.0;
    rec.val_loss = supervised_loss(model, val, norm);
    detail::check_finite(rec.val_loss, epoch, stage);
    if (probe) {
      const auto pr = probe(model);
      rec.metric = pr.metric;
      rec.validity = pr.validity;
    }
    if (verbose)
      std::cerr << "[" << stage << "] epoch " << epoch << " train " << rec.train_loss << " val " << rec.val_loss
                << " metric " << rec.metric << " validity " << rec.validity << "\n";
    result.history.epochs.push_back(rec);
    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      result.parameters = model.parameters();
      result.best_epoch = epoch;
    }
    if (rec.val_loss > prev_val) break;
    prev_val = rec.val_loss;
  }
  if (result.best_epoch == 0) result.parameters = model.parameters();
  return result;
}

template <class T>
TrainingResult<T> pretrain(ConditionalSequenceModel<T> model, const std::vector<LabeledExample>& train,
                           const std::vector<LabeledExample>& val, TrainingConfig cfg, const Probe<T>& probe = {},
                           bool verbose = false) {
  cfg.freeze_policy = FreezePolicy::all_trainable;
  return supervised_train(std::move(model), train, val, cfg, LossNormalization::per_token, probe, "pretrain", verbose);
}

template <class T>
TrainingResult<T> sft_train(ConditionalSequenceModel<T> model, const std::vector<LabeledExample>& train,
                            const std::vector<LabeledExample>& val, const TrainingConfig& cfg,
                            const Probe<T>& probe = {}, bool verbose = false) {
  return supervised_train(std::move(model), train, val, cfg, LossNormalization::per_sequence, probe, "sft", verbose);
}

// ---------------------------------------------------------------------------
// DPO

namespace detail {
// -log(sigmoid(z)), stable for large |z|.
inline double softplus_neg(double z) { return z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z)); }
inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}
}  // namespace detail

/// -log sigmoid(beta * ((logp_w - ref_w) - (logp_l - ref_l))).
inline double dpo_loss(double logp_w, double logp_l, double ref_logp_w, double ref_logp_l, double beta) {
  const double z = beta * ((logp_w - ref_logp_w) - (logp_l - ref_logp_l));
  return detail::softplus_neg(z);
}

struct DpoGrad {
  double d_logp_w = 0;
  double d_logp_l = 0;
};

inline DpoGrad dpo_loss_grad(double logp_w, double logp_l, double ref_logp_w, double ref_logp_l, double beta) {
  const double z = beta * ((logp_w - ref_logp_w) - (logp_l - ref_logp_l));
  const double s = detail::sigmoid(-z);
  return {-beta * s, beta * s};
}

template <class T>
struct MultiEpochResult {
  std::vector<ModelParameters<T>> per_epoch;
  TrainingHistory history;
  double initial_loss = 0;  // before any update
};

inline Conditioning pair_conditioning(const PreferencePair& p) { return full_conditioning(p.problem); }

template <class T>
double dpo_dataset_loss(const ConditionalSequenceModel<T>& policy, const std::vector<PreferencePair>& pairs,
                        const std::vector<std::array<double, 2>>& ref, double beta) {
  if (pairs.empty()) return 0.0;
  double total = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Conditioning c = pair_conditioning(pairs[i]);
    total += dpo_loss(sequence_log_prob(policy, c, pairs[i].preferred), sequence_log_prob(policy, c, pairs[i].rejected),
                      ref[i][0], ref[i][1], beta);
  }
  return total / static_cast<double>(pairs.size());
}

template <class T>
std::vector<std::array<double, 2>> reference_log_probs(const ConditionalSequenceModel<T>& ref,
                                                       const std::vector<PreferencePair>& pairs) {
  std::vector<std::array<double, 2>> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    const Conditioning c = pair_conditioning(p);
    out.push_back({sequence_log_prob(ref, c, p.preferred), sequence_log_prob(ref, c, p.rejected)});
  }
  return out;
}

/// Runs exactly cfg.max_epochs epochs against the fixed reference (the
/// starting model). Both encoders stay frozen.
template <class T>
MultiEpochResult<T> dpo_train(ConditionalSequenceModel<T> model, const std::vector<PreferencePair>& train,
                              const std::vector<PreferencePair>& val, TrainingConfig cfg, const Probe<T>& probe = {},
                              bool verbose = false) {
  cfg.check();
  cfg.freeze_policy = FreezePolicy::decoder_only;
  model.set_freeze(cfg.freeze_policy);
  const auto ref_train = reference_log_probs(model, train);
  const auto ref_val = reference_log_probs(model, val);
  MultiEpochResult<T> out;
  out.initial_loss = dpo_dataset_loss(model, train, ref_train, cfg.beta_kl);
  Adam<T> opt(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto order = detail::shuffled_indices(train.size(), cfg.seed, static_cast<std::uint64_t>(epoch));
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double inv_b = 1.0 / static_cast<double>(stop - start);
      Graph<T> g;
      auto vars = model.bind(g, true);
      std::vector<std::pair<typename Graph<T>::Var, T>> seeds;
      for (std::size_t i = start; i < stop; ++i) {
        const auto& pr = train[order[i]];
        const auto& rf = ref_train[order[i]];
        const Conditioning c = pair_conditioning(pr);
        auto lw = model.log_prob(g, vars, c, pr.preferred);
        auto ll = model.log_prob(g, vars, c, pr.rejected);
        const double vw = g.value(lw).data[0], vl = g.value(ll).data[0];
        epoch_loss += dpo_loss(vw, vl, rf[0], rf[1], cfg.beta_kl);
        const auto grad = dpo_loss_grad(vw, vl, rf[0], rf[1], cfg.beta_kl);
        seeds.push_back({lw, static_cast<T>(grad.d_logp_w * inv_b)});
        seeds.push_back({ll, static_cast<T>(grad.d_logp_l * inv_b)});
      }
      g.backward(seeds);
      opt.step(model.parameters(), detail::collect_grads(g, vars), model.trainable_mask(), cfg.learning_rate);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train.empty() ? 0.0 : epoch_loss / static_cast<double>(train.size());
    detail::check_finite(rec.train_loss, epoch, "dpo");
    rec.val_loss = dpo_dataset_loss(model, val, ref_val, cfg.beta_kl);
    if (probe) {
      const auto pr = probe(model);
      rec.metric = pr.metric;
      rec.validity = pr.validity;
    }
    if (verbose)
      std::cerr << "[dpo] epoch " << epoch << " train " << rec.train_loss << " val " << rec.val_loss << " metric "
                << rec.metric << " validity " << rec.validity << "\n";
    out.history.epochs.push_back(rec);
    out.per_epoch.push_back(model.parameters());
  }
  return out;
}

// ---------------------------------------------------------------------------
// PPO

/// -[min(rho R, clip(rho, 1-eps, 1+eps) R) - beta kl], rho = exp(new - old).
inline double ppo_loss(double logp_new, double logp_old, double reward, double clip_epsilon, double beta,
                       double kl_estimate) {
  const double rho = std::exp(logp_new - logp_old);
  const double clipped = std::clamp(rho, 1.0 - clip_epsilon, 1.0 + clip_epsilon);
  return -(std::min(rho * reward, clipped * reward) - beta * kl_estimate);
}

/// d ppo_loss / d logp_new, with kl_estimate held fixed.
inline double ppo_loss_grad(double logp_new, double logp_old, double reward, double clip_epsilon) {
  const double rho = std::exp(logp_new - logp_old);
  const double clipped = std::clamp(rho, 1.0 - clip_epsilon, 1.0 + clip_epsilon);
  // The clipped branch is constant in logp_new; it is active when strictly smaller.
  if (clipped * reward < rho * reward) return 0.0;
  return -rho * reward;
}

struct Rollout {
  std::size_t problem_index = 0;
  DesignSequence sequence;
  double logp_old = 0;
  double reward = 0;
};

/// Simulator-scored rollouts of one requirement's bound.
template <class T>
std::vector<Rollout> collect_rollouts(const ConditionalSequenceModel<T>& policy, const std::vector<Problem>& problems,
                                      RequirementKind kind, int count, RewardMode mode, std::uint64_t seed,
                                      std::uint64_t epoch, const GearCatalog& catalog, const ViolationScales& scales,
                                      const SamplingConfig& sampling = {}) {
  std::vector<Rollout> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int r = 0; r < count; ++r) {
    Rng rng = derive_rng(seed, {stream_tag("ppo-rollout"), epoch, static_cast<std::uint64_t>(r)});
    const std::size_t pi = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(problems.size()) - 1));
    const Problem& p = problems[pi];
    auto s = sample_with_log_prob(policy, full_conditioning(p), sampling, rng);
    const SimulationResult res = simulate(s.tokens, catalog);
    out.push_back({pi, std::move(s.tokens), s.log_prob, reward(res, requirement_for(p, kind, scales), mode)});
  }
  return out;
}

/// Clipped-ratio policy optimization with the simulator as reward oracle; no
/// critic. pi_old is refreshed at the start of every epoch. KL is estimated as
/// the mean per-token log-ratio over each minibatch's rollouts.
template <class T>
MultiEpochResult<T> ppo_train(ConditionalSequenceModel<T> model, const std::vector<Problem>& problems,
                              RequirementKind kind, TrainingConfig cfg, const GearCatalog& catalog,
                              const ViolationScales& scales, const Probe<T>& probe = {},
                              const std::vector<Problem>& val_problems = {}, bool verbose = false) {
  cfg.check();
  if (problems.empty()) throw std::invalid_argument("ppo_train needs problems");
  for (const auto& p : problems)
    if (!p.bound(kind)) throw std::invalid_argument("ppo_train problems must carry a bound for the requirement");
  if (cfg.freeze_policy == FreezePolicy::all_trainable) cfg.freeze_policy = FreezePolicy::decoder_only;
  model.set_freeze(cfg.freeze_policy);
  Adam<T> opt(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  MultiEpochResult<T> out;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    auto rollouts = collect_rollouts(model, problems, kind, cfg.rollouts_per_epoch, cfg.reward_mode, cfg.seed,
                                     static_cast<std::uint64_t>(epoch), catalog, scales);
    const auto order = detail::shuffled_indices(rollouts.size(), cfg.seed, static_cast<std::uint64_t>(1000 + epoch));
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double inv_b = 1.0 / static_cast<double>(stop - start);
      Graph<T> g;
      auto vars = model.bind(g, true);
      std::vector<typename Graph<T>::Var> lps;
      double tokens = 0, log_ratio_sum = 0;
      for (std::size_t i = start; i < stop; ++i) {
        const auto& ro = rollouts[order[i]];
        lps.push_back(model.log_prob(g, vars, full_conditioning(problems[ro.problem_index]), ro.sequence));
        tokens += static_cast<double>(scored_tokens(ro.sequence));
        log_ratio_sum += g.value(lps.back()).data[0] - ro.logp_old;
      }
      const double kl = log_ratio_sum / tokens;
      std::vector<std::pair<typename Graph<T>::Var, T>> seeds;
      for (std::size_t i = start; i < stop; ++i) {
        const auto& ro = rollouts[order[i]];
        const double lp = g.value(lps[i - start]).data[0];
        epoch_loss += ppo_loss(lp, ro.logp_old, ro.reward, cfg.clip_epsilon, cfg.beta_kl, kl);
        const double d = ppo_loss_grad(lp, ro.logp_old, ro.reward, cfg.clip_epsilon) * inv_b +
                         cfg.beta_kl / tokens;
        seeds.push_back({lps[i - start], static_cast<T>(d)});
      }
      g.backward(seeds);
      opt.step(model.parameters(), detail::collect_grads(g, vars), model.trainable_mask(), cfg.learning_rate);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(rollouts.size());
    detail::check_finite(rec.train_loss, epoch, "ppo");
    if (!val_problems.empty()) {
      auto vr = collect_rollouts(model, val_problems, kind, static_cast<int>(val_problems.size()), RewardMode::continuous,
                                 cfg.seed ^ 0x5a5aULL, static_cast<std::uint64_t>(epoch), catalog, scales);
      double mean_r = 0;
      for (const auto& r : vr) mean_r += r.reward;
      rec.val_loss = -mean_r / static_cast<double>(vr.size());
    }
    if (probe) {
      const auto pr = probe(model);
      rec.metric = pr.metric;
      rec.validity = pr.validity;
    }
    if (verbose)
      std::cerr << "[ppo] epoch " << epoch << " train " << rec.train_loss << " val " << rec.val_loss << " metric "
                << rec.metric << " validity " << rec.validity << "\n";
    out.history.epochs.push_back(rec);
    out.per_epoch.push_back(model.parameters());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Probing

/// Samples `per_problem` designs for each problem. For equality requirements
/// the metric is the mean raw violation over valid samples; for inequality
/// requirements it is the percentage of samples meeting the bound (invalid
/// samples count as not met).
template <class T>
ProbeResult probe_requirement(const ConditionalSequenceModel<T>& model, const std::vector<Problem>& problems,
                              RequirementKind kind, const std::function<Conditioning(const Problem&)>& conditioning,
                              std::uint64_t seed, int per_problem, const GearCatalog& catalog,
                              const ViolationScales& scales = {}, const Tolerances& tol = {},
                              const SamplingConfig& sampling = {}) {
  int total = 0, valid = 0, met = 0;
  double viol = 0;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    Rng rng = derive_rng(seed, {stream_tag("probe"), static_cast<std::uint64_t>(i)});
    const Conditioning c = conditioning(problems[i]);
    for (int k = 0; k < per_problem; ++k) {
      const SimulationResult r = simulate(sample(model, c, sampling, rng), catalog);
      ++total;
      if (!r.valid) continue;
      ++valid;
      if (is_original(kind)) viol += violation(r, requirement_for(problems[i], kind, scales));
      else if (meets(r, problems[i], kind, tol, scales)) ++met;
    }
  }
  ProbeResult out;
  out.validity = total ? static_cast<double>(valid) / total : 0.0;
  if (is_original(kind)) out.metric = valid ? viol / valid : 0.0;
  else out.metric = total ? 100.0 * met / total : 0.0;
  return out;
}

}  // namespace esimft
