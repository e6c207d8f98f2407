#pragma once

// Conditional encoder-decoder sequence model over design tokens.
//
// Conditioning becomes a short list of memory tokens:
//   speed target      -> 1 token  (orig_enc.speed, linear in log-ratio)
//   position target   -> 1 token  (orig_enc.pos, linear in the 3-vector)
//   each bound        -> 1 token  (bound_enc, from [value/scale, is_bbox, is_cost])
//   preference vector -> 1 token  (pref_enc, from the 4 preference weights)
// The memory passes through pre-LN self-attention encoder layers (part of the
// original encoder group) and is attended to by a causal pre-LN decoder.

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "esimft/autograd.hpp"
#include "esimft/gear_domain.hpp"
#include "esimft/model_params.hpp"
#include "esimft/rng.hpp"
#include "esimft/simulator.hpp"

namespace esimft {

struct Conditioning {
  double speed_target = 0.0;  // log ratio
  Vec3 position_target{0.0, 0.0, 0.0};
  std::optional<double> bbox_bound;
  std::optional<double> cost_bound;
  std::optional<std::array<double, 4>> preference;  // speed, position, bbox, cost
};

struct SamplingConfig {
  double temperature = 1.0;
  int max_length = kMaxSequenceLength;

  void check() const {
    if (!(temperature > 0)) throw std::invalid_argument("temperature must be positive");
    if (max_length < 1 || max_length > kMaxSequenceLength) throw std::invalid_argument("max_length must be in [1, 42]");
  }
};

inline constexpr double kSpeedInputScale = 0.5;
inline constexpr double kPositionInputScale = 1.0;
inline constexpr int kMaxPositions = 64;

namespace detail {

struct LnIdx {
  std::size_t g, b;
};
struct AttnIdx {
  std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
};
struct FfIdx {
  std::size_t w1, b1, w2, b2;
};
struct EncoderLayerIdx {
  LnIdx ln1;
  AttnIdx attn;
  LnIdx ln2;
  FfIdx ff;
};
struct DecoderLayerIdx {
  LnIdx ln1;
  AttnIdx self;
  LnIdx ln2;
  AttnIdx cross;
  LnIdx ln3;
  FfIdx ff;
};

struct Layout {
  std::size_t speed_w, speed_b, pos_w, pos_b;
  std::size_t bound_w, bound_b, pref_w, pref_b;
  std::vector<EncoderLayerIdx> encoder;
  LnIdx enc_final;
  std::size_t embed;
  std::vector<DecoderLayerIdx> decoder;
  LnIdx dec_final;
  std::size_t out_w, out_b;
};

template <class T>
Layout make_layout(const ModelParameters<T>& p) {
  const auto& a = p.architecture();
  auto ix = [&](const std::string& n) { return p.index_of(n); };
  auto ln = [&](const std::string& n) { return LnIdx{ix(n + ".g"), ix(n + ".b")}; };
  auto attn = [&](const std::string& n) {
    return AttnIdx{ix(n + ".wq"), ix(n + ".bq"), ix(n + ".wk"), ix(n + ".bk"),
                   ix(n + ".wv"), ix(n + ".bv"), ix(n + ".wo"), ix(n + ".bo")};
  };
  auto ff = [&](const std::string& n) { return FfIdx{ix(n + ".w1"), ix(n + ".b1"), ix(n + ".w2"), ix(n + ".b2")}; };

  Layout l{};
  l.speed_w = ix("orig_enc.speed.w");
  l.speed_b = ix("orig_enc.speed.b");
  l.pos_w = ix("orig_enc.pos.w");
  l.pos_b = ix("orig_enc.pos.b");
  for (int i = 0; i < a.encoder_layers; ++i) {
    const std::string pre = "orig_enc.layer" + std::to_string(i);
    l.encoder.push_back({ln(pre + ".ln1"), attn(pre + ".attn"), ln(pre + ".ln2"), ff(pre + ".ff")});
  }
  l.enc_final = ln("orig_enc.ln_f");
  l.bound_w = ix("bound_enc.w");
  l.bound_b = ix("bound_enc.b");
  l.pref_w = ix("pref_enc.w");
  l.pref_b = ix("pref_enc.b");
  l.embed = ix("decoder.embed");
  for (int i = 0; i < a.decoder_layers; ++i) {
    const std::string pre = "decoder.layer" + std::to_string(i);
    l.decoder.push_back({ln(pre + ".ln1"), attn(pre + ".self"), ln(pre + ".ln2"), attn(pre + ".cross"),
                         ln(pre + ".ln3"), ff(pre + ".ff")});
  }
  l.dec_final = ln("decoder.ln_f");
  l.out_w = ix("decoder.out.w");
  l.out_b = ix("decoder.out.b");
  return l;
}

template <class T>
Matrix<T> sinusoidal_positions(int rows, int d) {
  Matrix<T> pe(static_cast<std::size_t>(rows), static_cast<std::size_t>(d));
  for (int pos = 0; pos < rows; ++pos)
    for (int i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / d);
      pe(static_cast<std::size_t>(pos), static_cast<std::size_t>(i)) = static_cast<T>(std::sin(pos * freq));
      if (i + 1 < d) pe(static_cast<std::size_t>(pos), static_cast<std::size_t>(i + 1)) = static_cast<T>(std::cos(pos * freq));
    }
  return pe;
}

}  // namespace detail

/// Fresh parameters in a fixed order. Weights ~ N(0, gain / sqrt(fan_in)).
template <class T>
ModelParameters<T> initialize_parameters(const Architecture& arch, std::uint64_t seed) {
  arch.check();
  Rng rng = derive_rng(seed, {stream_tag("init")});
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d = static_cast<std::size_t>(arch.d_model);
  const auto f = static_cast<std::size_t>(arch.ff_width);
  const double residual_gain = 1.0 / std::sqrt(2.0 * (arch.encoder_layers + arch.decoder_layers));

  ModelParameters<T> p(arch);
  auto randn = [&](std::size_t r, std::size_t c, double stddev) {
    Matrix<T> m(r, c);
    for (auto& v : m.data) v = static_cast<T>(stddev * normal(rng));
    return m;
  };
  auto weight = [&](const std::string& n, std::size_t in, std::size_t out, double gain = 1.0) {
    p.add(n, randn(in, out, gain / std::sqrt(static_cast<double>(in))));
  };
  auto zeros = [&](const std::string& n, std::size_t c) { p.add(n, Matrix<T>(1, c)); };
  auto ln = [&](const std::string& n) {
    p.add(n + ".g", Matrix<T>(1, d, T(1)));
    zeros(n + ".b", d);
  };
  auto attn = [&](const std::string& n) {
    for (const char* w : {".wq", ".wk", ".wv"}) {
      weight(n + w, d, d);
      zeros(n + ".b" + std::string(w).substr(2), d);
    }
    weight(n + ".wo", d, d, residual_gain);
    zeros(n + ".bo", d);
  };
  auto ff = [&](const std::string& n) {
    weight(n + ".w1", d, f);
    zeros(n + ".b1", f);
    weight(n + ".w2", f, d, residual_gain);
    zeros(n + ".b2", d);
  };

  p.add("orig_enc.speed.w", randn(1, d, 1.0));
  p.add("orig_enc.speed.b", randn(1, d, 1.0));
  p.add("orig_enc.pos.w", randn(3, d, 1.0));
  p.add("orig_enc.pos.b", randn(1, d, 1.0));
  for (int i = 0; i < arch.encoder_layers; ++i) {
    const std::string pre = "orig_enc.layer" + std::to_string(i);
    ln(pre + ".ln1");
    attn(pre + ".attn");
    ln(pre + ".ln2");
    ff(pre + ".ff");
  }
  ln("orig_enc.ln_f");
  p.add("bound_enc.w", randn(3, d, 1.0));
  p.add("bound_enc.b", randn(1, d, 1.0));
  p.add("pref_enc.w", randn(4, d, 1.0));
  p.add("pref_enc.b", randn(1, d, 1.0));
  p.add("decoder.embed", randn(static_cast<std::size_t>(kNumTokenIds), d, 1.0));
  for (int i = 0; i < arch.decoder_layers; ++i) {
    const std::string pre = "decoder.layer" + std::to_string(i);
    ln(pre + ".ln1");
    attn(pre + ".self");
    ln(pre + ".ln2");
    attn(pre + ".cross");
    ln(pre + ".ln3");
    ff(pre + ".ff");
  }
  ln("decoder.ln_f");
  weight("decoder.out.w", d, static_cast<std::size_t>(kNumOutputTokens));
  zeros("decoder.out.b", static_cast<std::size_t>(kNumOutputTokens));
  return p;
}

template <class T>
class ConditionalSequenceModel {
 public:
  using Var = typename Graph<T>::Var;

  explicit ConditionalSequenceModel(ModelParameters<T> params)
      : params_(std::move(params)),
        layout_(detail::make_layout(params_)),
        positions_(detail::sinusoidal_positions<T>(kMaxPositions, params_.architecture().d_model)),
        trainable_(params_.size(), true) {
    params_.architecture().check();
  }

  static ConditionalSequenceModel initialize(const Architecture& arch, std::uint64_t seed) {
    return ConditionalSequenceModel(initialize_parameters<T>(arch, seed));
  }

  ConditionalSequenceModel(const ConditionalSequenceModel& o)
      : params_(o.params_), layout_(o.layout_), positions_(o.positions_), trainable_(o.trainable_) {}
  ConditionalSequenceModel& operator=(const ConditionalSequenceModel& o) {
    params_ = o.params_;
    layout_ = o.layout_;
    positions_ = o.positions_;
    trainable_ = o.trainable_;
    return *this;
  }
  ConditionalSequenceModel(ConditionalSequenceModel&&) noexcept = default;
  ConditionalSequenceModel& operator=(ConditionalSequenceModel&&) noexcept = default;

  const Architecture& architecture() const { return params_.architecture(); }
  const ModelParameters<T>& parameters() const { return params_; }
  ModelParameters<T>& parameters() { return params_; }

  void set_freeze(FreezePolicy policy) { trainable_ = freeze_mask(params_, policy); }
  const std::vector<bool>& trainable_mask() const { return trainable_; }
  bool trainable(std::size_t i) const { return trainable_[i]; }

  /// Graph leaves for every tensor. Leaves view the model's own storage, so
  /// the model must not be mutated while the graph is alive.
  std::vector<Var> bind(Graph<T>& g, bool with_grad) const {
    std::vector<Var> vars;
    vars.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) vars.push_back(g.view(params_[i].value, with_grad && trainable_[i]));
    return vars;
  }

  /// Encoder memory, [num_tokens, d_model].
  Var memory(Graph<T>& g, const std::vector<Var>& p, const Conditioning& c) const {
    const auto& L = layout_;
    const auto& a = architecture();
    auto row = [](std::initializer_list<double> vals) {
      Matrix<T> m(1, vals.size());
      std::size_t i = 0;
      for (double v : vals) m.data[i++] = static_cast<T>(v);
      return m;
    };
    std::vector<Var> parts;
    parts.push_back(g.linear(g.leaf(row({c.speed_target * kSpeedInputScale})), p[L.speed_w], p[L.speed_b]));
    const auto& pt = c.position_target;
    parts.push_back(g.linear(g.leaf(row({pt[0] * kPositionInputScale, pt[1] * kPositionInputScale, pt[2] * kPositionInputScale})),
                             p[L.pos_w], p[L.pos_b]));
    if (c.bbox_bound)
      parts.push_back(g.linear(g.leaf(row({*c.bbox_bound / a.bbox_bound_scale, 1.0, 0.0})), p[L.bound_w], p[L.bound_b]));
    if (c.cost_bound)
      parts.push_back(g.linear(g.leaf(row({*c.cost_bound / a.cost_bound_scale, 0.0, 1.0})), p[L.bound_w], p[L.bound_b]));
    if (c.preference) {
      const auto& w = *c.preference;
      parts.push_back(g.linear(g.leaf(row({w[0], w[1], w[2], w[3]})), p[L.pref_w], p[L.pref_b]));
    }
    Var m = g.concat_rows(parts);
    const auto heads = static_cast<std::size_t>(a.heads);
    for (const auto& layer : L.encoder) {
      Var h = g.layer_norm(m, p[layer.ln1.g], p[layer.ln1.b]);
      Var q = g.linear(h, p[layer.attn.wq], p[layer.attn.bq]);
      Var k = g.linear(h, p[layer.attn.wk], p[layer.attn.bk]);
      Var v = g.linear(h, p[layer.attn.wv], p[layer.attn.bv]);
      m = g.add(m, g.linear(g.attention(q, k, v, heads, false), p[layer.attn.wo], p[layer.attn.bo]));
      h = g.layer_norm(m, p[layer.ln2.g], p[layer.ln2.b]);
      m = g.add(m, feed_forward(g, p, layer.ff, h));
    }
    return g.layer_norm(m, p[L.enc_final.g], p[L.enc_final.b]);
  }

  /// Next-token logits for every input position, [len, 11].
  Var decode(Graph<T>& g, const std::vector<Var>& p, Var mem, const std::vector<int>& input_ids) const {
    const auto& L = layout_;
    if (input_ids.size() > static_cast<std::size_t>(kMaxPositions)) throw std::invalid_argument("sequence too long");
    const auto heads = static_cast<std::size_t>(architecture().heads);
    Var x = g.add_const(g.embed(p[L.embed], input_ids), positions_);
    for (const auto& layer : L.decoder) {
      Var h = g.layer_norm(x, p[layer.ln1.g], p[layer.ln1.b]);
      Var q = g.linear(h, p[layer.self.wq], p[layer.self.bq]);
      Var k = g.linear(h, p[layer.self.wk], p[layer.self.bk]);
      Var v = g.linear(h, p[layer.self.wv], p[layer.self.bv]);
      x = g.add(x, g.linear(g.attention(q, k, v, heads, true), p[layer.self.wo], p[layer.self.bo]));
      h = g.layer_norm(x, p[layer.ln2.g], p[layer.ln2.b]);
      q = g.linear(h, p[layer.cross.wq], p[layer.cross.bq]);
      k = g.linear(mem, p[layer.cross.wk], p[layer.cross.bk]);
      v = g.linear(mem, p[layer.cross.wv], p[layer.cross.bv]);
      x = g.add(x, g.linear(g.attention(q, k, v, heads, false), p[layer.cross.wo], p[layer.cross.bo]));
      h = g.layer_norm(x, p[layer.ln3.g], p[layer.ln3.b]);
      x = g.add(x, feed_forward(g, p, layer.ff, h));
    }
    x = g.layer_norm(x, p[L.dec_final.g], p[L.dec_final.b]);
    return g.linear(x, p[L.out_w], p[L.out_b]);
  }

  /// log pi(seq | conditioning) as a 1x1 graph node: the sum over steps of the
  /// log probability of each next token given its prefix.
  Var log_prob(Graph<T>& g, const std::vector<Var>& p, const Conditioning& c, const DesignSequence& seq) const {
    if (seq.size() < 2) throw std::invalid_argument("sequence must contain SOS and at least one scored token");
    if (seq.front().kind() != TokenKind::sos) throw std::invalid_argument("sequence must begin with SOS");
    std::vector<int> inputs, targets;
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      inputs.push_back(seq[i].id());
      const int t = seq[i + 1].id();
      if (t >= kNumOutputTokens) throw std::out_of_range("token id " + std::to_string(t) + " out of vocabulary");
      targets.push_back(t);
    }
    Var mem = memory(g, p, c);
    return g.sum_log_prob(decode(g, p, mem, inputs), targets);
  }

  // ---- cached inference ---------------------------------------------------

  /// Incremental decoder state for one conditioning; feeds one token at a time
  /// and returns next-token logits.
  class Session {
   public:
    Session(const ConditionalSequenceModel& model, const Conditioning& c) : m_(model) {
      Graph<T> g;
      auto p = m_.bind(g, false);
      const Matrix<T> mem = g.value(m_.memory(g, p, c));
      const auto& P = m_.params_;
      for (const auto& layer : m_.layout_.decoder) {
        cross_k_.push_back(kernels::linear(mem, P[layer.cross.wk].value, P[layer.cross.bk].value));
        cross_v_.push_back(kernels::linear(mem, P[layer.cross.wv].value, P[layer.cross.bv].value));
        self_k_.emplace_back(0, static_cast<std::size_t>(m_.architecture().d_model));
        self_v_.emplace_back(0, static_cast<std::size_t>(m_.architecture().d_model));
      }
    }

    std::size_t position() const { return pos_; }

    std::vector<T> step(int token_id) {
      if (pos_ >= static_cast<std::size_t>(kMaxPositions)) throw std::invalid_argument("sequence too long");
      const auto& P = m_.params_;
      const auto& L = m_.layout_;
      const auto heads = static_cast<std::size_t>(m_.architecture().heads);
      const auto d = static_cast<std::size_t>(m_.architecture().d_model);
      Matrix<T> x(1, d);
      const auto& emb = P[L.embed].value;
      for (std::size_t j = 0; j < d; ++j) x.data[j] = emb(static_cast<std::size_t>(token_id), j) + m_.positions_(pos_, j);
      auto residual = [](Matrix<T>& acc, const Matrix<T>& delta) {
        for (std::size_t j = 0; j < acc.size(); ++j) acc.data[j] += delta.data[j];
      };
      for (std::size_t li = 0; li < L.decoder.size(); ++li) {
        const auto& layer = L.decoder[li];
        Matrix<T> h = kernels::layer_norm(x, P[layer.ln1.g].value, P[layer.ln1.b].value);
        Matrix<T> q = kernels::linear(h, P[layer.self.wq].value, P[layer.self.bq].value);
        append_row(self_k_[li], kernels::linear(h, P[layer.self.wk].value, P[layer.self.bk].value));
        append_row(self_v_[li], kernels::linear(h, P[layer.self.wv].value, P[layer.self.bv].value));
        residual(x, kernels::linear(kernels::attention(q, self_k_[li], self_v_[li], heads, false), P[layer.self.wo].value,
                                    P[layer.self.bo].value));
        h = kernels::layer_norm(x, P[layer.ln2.g].value, P[layer.ln2.b].value);
        q = kernels::linear(h, P[layer.cross.wq].value, P[layer.cross.bq].value);
        residual(x, kernels::linear(kernels::attention(q, cross_k_[li], cross_v_[li], heads, false),
                                    P[layer.cross.wo].value, P[layer.cross.bo].value));
        h = kernels::layer_norm(x, P[layer.ln3.g].value, P[layer.ln3.b].value);
        Matrix<T> f = kernels::linear(h, P[layer.ff.w1].value, P[layer.ff.b1].value);
        for (auto& v : f.data) v = kernels::gelu(v);
        residual(x, kernels::linear(f, P[layer.ff.w2].value, P[layer.ff.b2].value));
      }
      x = kernels::layer_norm(x, P[L.dec_final.g].value, P[L.dec_final.b].value);
      ++pos_;
      return kernels::linear(x, P[L.out_w].value, P[L.out_b].value).data;
    }

   private:
    static void append_row(Matrix<T>& m, const Matrix<T>& r) {
      m.data.insert(m.data.end(), r.data.begin(), r.data.end());
      ++m.rows;
    }

    const ConditionalSequenceModel& m_;
    std::vector<Matrix<T>> cross_k_, cross_v_, self_k_, self_v_;
    std::size_t pos_ = 0;
  };

 private:
  Var feed_forward(Graph<T>& g, const std::vector<Var>& p, const detail::FfIdx& ff, Var h) const {
    return g.linear(g.gelu(g.linear(h, p[ff.w1], p[ff.b1])), p[ff.w2], p[ff.b2]);
  }

  ModelParameters<T> params_;
  detail::Layout layout_;
  Matrix<T> positions_;
  std::vector<bool> trainable_;
};

using Model = ConditionalSequenceModel<float>;

// ---------------------------------------------------------------------------
// Free-function API

template <class T>
void set_freeze(ConditionalSequenceModel<T>& model, FreezePolicy policy) {
  model.set_freeze(policy);
}

/// log pi(seq | conditioning) without building gradients.
template <class T>
double sequence_log_prob(const ConditionalSequenceModel<T>& model, const Conditioning& c, const DesignSequence& seq) {
  Graph<T> g;
  auto p = model.bind(g, false);
  return static_cast<double>(g.value(model.log_prob(g, p, c, seq)).data[0]);
}

struct SampledSequence {
  DesignSequence tokens;
  double log_prob = 0.0;  // under the model at temperature 1
};

/// Autoregressive categorical sampling from logits / temperature. Stops at EOS
/// or when the sequence reaches cfg.max_length tokens (SOS included).
template <class T>
SampledSequence sample_with_log_prob(const ConditionalSequenceModel<T>& model, const Conditioning& c,
                                     const SamplingConfig& cfg, Rng& rng) {
  cfg.check();
  SampledSequence out;
  out.tokens.push_back(Token::sos());
  typename ConditionalSequenceModel<T>::Session session(model, c);
  std::vector<double> probs(static_cast<std::size_t>(kNumOutputTokens));
  while (static_cast<int>(out.tokens.size()) < cfg.max_length) {
    const std::vector<T> logits = session.step(out.tokens.back().id());
    std::vector<double> z(logits.begin(), logits.end());
    const double lse = kernels::log_sum_exp(z.data(), z.size());
    for (std::size_t i = 0; i < z.size(); ++i) probs[i] = z[i] / cfg.temperature;
    kernels::softmax_inplace(probs.data(), probs.size());
    const double u = uniform01(rng);
    std::size_t pick = probs.size() - 1;
    double cum = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      cum += probs[i];
      if (u < cum) {
        pick = i;
        break;
      }
    }
    // Guard against rounding picking a zero-probability tail entry.
    while (probs[pick] == 0.0 && pick > 0) --pick;
    out.log_prob += z[pick] - lse;
    out.tokens.push_back(*Token::from_id(static_cast<int>(pick)));
    if (pick == static_cast<std::size_t>(kEosId)) break;
  }
  return out;
}

template <class T>
DesignSequence sample(const ConditionalSequenceModel<T>& model, const Conditioning& c, const SamplingConfig& cfg, Rng& rng) {
  return sample_with_log_prob(model, c, cfg, rng).tokens;
}

template <class T>
DesignSequence greedy_decode(const ConditionalSequenceModel<T>& model, const Conditioning& c,
                             int max_length = kMaxSequenceLength) {
  DesignSequence seq{Token::sos()};
  typename ConditionalSequenceModel<T>::Session session(model, c);
  while (static_cast<int>(seq.size()) < max_length) {
    const std::vector<T> logits = session.step(seq.back().id());
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
      if (logits[i] > logits[best]) best = i;
    seq.push_back(*Token::from_id(static_cast<int>(best)));
    if (best == static_cast<std::size_t>(kEosId)) break;
  }
  return seq;
}

/// Per-step next-token distributions for a given prefix (teacher forced).
template <class T>
std::vector<std::vector<double>> step_distributions(const ConditionalSequenceModel<T>& model, const Conditioning& c,
                                                    const DesignSequence& prefix) {
  typename ConditionalSequenceModel<T>::Session session(model, c);
  std::vector<std::vector<double>> out;
  for (auto t : prefix) {
    auto logits = session.step(t.id());
    std::vector<double> p(logits.begin(), logits.end());
    kernels::softmax_inplace(p.data(), p.size());
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace esimft
