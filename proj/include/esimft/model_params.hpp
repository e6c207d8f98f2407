#pragma once

// Named parameter tensors of the conditional sequence model, freeze policies
// and linear parameter interpolation.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "esimft/tensor.hpp"

namespace esimft {

struct Architecture {
  int d_model = 64;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int heads = 4;
  int ff_width = 128;
  // Bounds enter the bound encoder as value / scale.
  double bbox_bound_scale = 0.05;
  double cost_bound_scale = 10.0;

  bool operator==(const Architecture&) const = default;

  void check() const {
    if (d_model < 1 || heads < 1 || d_model % heads != 0) throw std::invalid_argument("d_model must be a multiple of heads");
    if (encoder_layers < 0 || decoder_layers < 1 || ff_width < 1) throw std::invalid_argument("bad layer configuration");
    if (!(bbox_bound_scale > 0) || !(cost_bound_scale > 0)) throw std::invalid_argument("bound scales must be positive");
  }
};

// Every tensor is stored 2-D; vectors are [1, n].
template <class T>
struct NamedTensor {
  std::string name;
  Matrix<T> value;
};

template <class T>
class ModelParameters {
 public:
  ModelParameters() = default;
  explicit ModelParameters(Architecture arch) : arch_(arch) {}

  const Architecture& architecture() const { return arch_; }

  std::size_t add(std::string name, Matrix<T> value) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate tensor name " + name);
    index_.emplace(name, tensors_.size());
    tensors_.push_back({std::move(name), std::move(value)});
    return tensors_.size() - 1;
  }

  std::size_t size() const { return tensors_.size(); }
  NamedTensor<T>& operator[](std::size_t i) { return tensors_[i]; }
  const NamedTensor<T>& operator[](std::size_t i) const { return tensors_[i]; }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

  std::size_t index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw std::out_of_range("no tensor named " + std::string(name));
    return it->second;
  }
  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }
  const Matrix<T>& at(std::string_view name) const { return tensors_[index_of(name)].value; }
  Matrix<T>& at(std::string_view name) { return tensors_[index_of(name)].value; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.value.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& t : tensors_)
      for (T v : t.value.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  /// Same names in the same order with the same shapes.
  bool compatible_with(const ModelParameters& other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      const auto& a = tensors_[i];
      const auto& b = other.tensors_[i];
      if (a.name != b.name || a.value.rows != b.value.rows || a.value.cols != b.value.cols) return false;
    }
    return true;
  }

  template <class U>
  ModelParameters<U> cast() const {
    ModelParameters<U> out(arch_);
    for (const auto& t : tensors_) {
      Matrix<U> m(t.value.rows, t.value.cols);
      for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = static_cast<U>(t.value.data[i]);
      out.add(t.name, std::move(m));
    }
    return out;
  }

  bool operator==(const ModelParameters& other) const {
    if (!(arch_ == other.arch_) || !compatible_with(other)) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i)
      if (tensors_[i].value.data != other.tensors_[i].value.data) return false;
    return true;
  }

 private:
  Architecture arch_;
  std::vector<NamedTensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Freezing

// Tensor groups, by name prefix.
inline constexpr std::string_view kOriginalEncoderPrefix = "orig_enc.";
inline constexpr std::string_view kBoundEncoderPrefix = "bound_enc.";
inline constexpr std::string_view kPreferenceEncoderPrefix = "pref_enc.";
inline constexpr std::string_view kDecoderPrefix = "decoder.";

enum class FreezePolicy : std::uint8_t {
  decoder_only,
  decoder_and_new_encoder,   // decoder + bound encoder
  decoder_and_aux_encoders,  // decoder + bound encoder + preference encoder
  all_trainable,
};

inline std::string_view freeze_policy_name(FreezePolicy p) {
  switch (p) {
    case FreezePolicy::decoder_only: return "decoder_only";
    case FreezePolicy::decoder_and_new_encoder: return "decoder_and_new_encoder";
    case FreezePolicy::decoder_and_aux_encoders: return "decoder_and_aux_encoders";
    case FreezePolicy::all_trainable: return "all_trainable";
  }
  return "?";
}

inline bool is_trainable(std::string_view tensor_name, FreezePolicy policy) {
  auto starts = [&](std::string_view prefix) { return tensor_name.substr(0, prefix.size()) == prefix; };
  switch (policy) {
    case FreezePolicy::all_trainable: return true;
    case FreezePolicy::decoder_only: return starts(kDecoderPrefix);
    case FreezePolicy::decoder_and_new_encoder: return starts(kDecoderPrefix) || starts(kBoundEncoderPrefix);
    case FreezePolicy::decoder_and_aux_encoders:
      return starts(kDecoderPrefix) || starts(kBoundEncoderPrefix) || starts(kPreferenceEncoderPrefix);
  }
  return false;
}

template <class T>
std::vector<bool> freeze_mask(const ModelParameters<T>& params, FreezePolicy policy) {
  std::vector<bool> mask(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) mask[i] = is_trainable(params[i].name, policy);
  return mask;
}

// ---------------------------------------------------------------------------
// Interpolation

/// Elementwise convex combination of compatible parameter sets. Accumulates in
/// double, so a one-hot weight vector reproduces its model exactly.
template <class T>
ModelParameters<T> interpolate_parameters(std::span<const ModelParameters<T>* const> models, std::span<const double> weights) {
  if (models.empty() || models.size() != weights.size()) throw std::invalid_argument("need one weight per model");
  double total = 0;
  for (double w : weights) {
    if (!(w >= 0) || !std::isfinite(w)) throw std::invalid_argument("interpolation weights must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("interpolation weights must sum to 1");
  const auto& first = *models.front();
  for (const auto* m : models)
    if (!first.compatible_with(*m) || !(first.architecture() == m->architecture()))
      throw std::invalid_argument("models are not interpolation-compatible");

  ModelParameters<T> out(first.architecture());
  for (std::size_t t = 0; t < first.size(); ++t) {
    const auto& ref = first[t].value;
    Matrix<T> acc(ref.rows, ref.cols);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      double s = 0;
      bool started = false;
      for (std::size_t k = 0; k < models.size(); ++k) {
        if (weights[k] == 0.0) continue;
        const double term = weights[k] * static_cast<double>((*models[k])[t].value.data[i]);
        s = started ? s + term : term;
        started = true;
      }
      acc.data[i] = static_cast<T>(s);
    }
    out.add(first[t].name, std::move(acc));
  }
  return out;
}

template <class T>
ModelParameters<T> interpolate_parameters(const std::vector<const ModelParameters<T>*>& models,
                                          const std::vector<double>& weights) {
  return interpolate_parameters<T>(std::span<const ModelParameters<T>* const>(models.data(), models.size()),
                                   std::span<const double>(weights.data(), weights.size()));
}

}  // namespace esimft
