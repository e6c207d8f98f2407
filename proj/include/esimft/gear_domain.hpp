#pragma once

// Token vocabulary, component catalog and grammar of gear-train design
// sequences.
//
// Grammar:  SOS (SHAFT [GEAR]){1..20} EOS, with at least one GEAR overall.
// Trailing PAD after EOS is tolerated; PAD anywhere before EOS is not.

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "esimft/rng.hpp"

namespace esimft {

inline constexpr int kNumShaftVariants = 3;
inline constexpr int kNumGearVariants = 6;
inline constexpr int kMaxStages = 20;
inline constexpr int kMaxSequenceLength = 2 + 2 * kMaxStages;  // 42

// Token ids. PAD is last so that ids [0, kNumOutputTokens) are exactly the
// tokens a decoder can emit.
inline constexpr int kSosId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kFirstShaftId = 2;
inline constexpr int kFirstGearId = kFirstShaftId + kNumShaftVariants;  // 5
inline constexpr int kPadId = kFirstGearId + kNumGearVariants;          // 11
inline constexpr int kNumTokenIds = kPadId + 1;                         // 12
inline constexpr int kNumOutputTokens = kPadId;                         // 11

inline constexpr std::array<double, kNumShaftVariants> kShaftLengths{0.1, 0.2, 0.4};

enum class TokenKind : std::uint8_t { sos, eos, shaft, gear, pad };

class Token {
 public:
  constexpr Token() = default;

  static constexpr Token sos() { return Token(kSosId); }
  static constexpr Token eos() { return Token(kEosId); }
  static constexpr Token pad() { return Token(kPadId); }
  static constexpr Token shaft(int length_index) {
    if (length_index < 0 || length_index >= kNumShaftVariants) throw std::out_of_range("shaft length index");
    return Token(kFirstShaftId + length_index);
  }
  static constexpr Token gear(int catalog_id) {
    if (catalog_id < 0 || catalog_id >= kNumGearVariants) throw std::out_of_range("gear catalog id");
    return Token(kFirstGearId + catalog_id);
  }
  static constexpr std::optional<Token> from_id(int id) {
    if (id < 0 || id >= kNumTokenIds) return std::nullopt;
    return Token(id);
  }

  constexpr int id() const { return id_; }

  constexpr TokenKind kind() const {
    if (id_ == kSosId) return TokenKind::sos;
    if (id_ == kEosId) return TokenKind::eos;
    if (id_ == kPadId) return TokenKind::pad;
    if (id_ < kFirstGearId) return TokenKind::shaft;
    return TokenKind::gear;
  }

  // Only meaningful for the matching kind.
  constexpr int shaft_index() const { return id_ - kFirstShaftId; }
  constexpr int gear_id() const { return id_ - kFirstGearId; }
  constexpr double shaft_length() const { return kShaftLengths[static_cast<std::size_t>(shaft_index())]; }

  constexpr bool operator==(const Token&) const = default;

 private:
  constexpr explicit Token(int id) : id_(static_cast<std::uint8_t>(id)) {}
  std::uint8_t id_ = kPadId;
};

inline std::string token_name(Token t) {
  switch (t.kind()) {
    case TokenKind::sos: return "SOS";
    case TokenKind::eos: return "EOS";
    case TokenKind::pad: return "PAD";
    case TokenKind::shaft: {
      static constexpr std::array<const char*, 3> names{"SHAFT_0.1", "SHAFT_0.2", "SHAFT_0.4"};
      return names[static_cast<std::size_t>(t.shaft_index())];
    }
    case TokenKind::gear: return "GEAR_" + std::to_string(t.gear_id());
  }
  return "?";
}

using DesignSequence = std::vector<Token>;

inline std::vector<int> to_ids(const DesignSequence& seq) {
  std::vector<int> ids;
  ids.reserve(seq.size());
  for (auto t : seq) ids.push_back(t.id());
  return ids;
}

inline DesignSequence from_ids(const std::vector<int>& ids) {
  DesignSequence seq;
  seq.reserve(ids.size());
  for (int id : ids) {
    auto t = Token::from_id(id);
    if (!t) throw std::out_of_range("token id " + std::to_string(id) + " out of vocabulary");
    seq.push_back(*t);
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Catalog

enum class AxisEffect : std::uint8_t { parallel, perpendicular };

struct GearCatalogEntry {
  int catalog_id = 0;
  int driver_teeth = 20;
  int driven_teeth = 20;
  AxisEffect axis_effect = AxisEffect::parallel;
  double price = 1.0;
  double gear_radius_per_tooth = 0.005;  // m / tooth

  double ratio() const { return static_cast<double>(driven_teeth) / static_cast<double>(driver_teeth); }
};

using GearCatalog = std::vector<GearCatalogEntry>;

inline GearCatalog default_catalog() {
  constexpr double r = 0.005;
  return {
      {0, 20, 40, AxisEffect::parallel, 5.0, r},
      {1, 20, 20, AxisEffect::parallel, 4.0, r},
      {2, 40, 20, AxisEffect::parallel, 5.0, r},
      {3, 10, 30, AxisEffect::perpendicular, 8.0, r},
      {4, 30, 10, AxisEffect::perpendicular, 8.0, r},
      {5, 15, 15, AxisEffect::perpendicular, 7.0, r},
  };
}

inline void check_catalog(const GearCatalog& catalog) {
  if (catalog.size() != static_cast<std::size_t>(kNumGearVariants))
    throw std::invalid_argument("gear catalog must have exactly " + std::to_string(kNumGearVariants) + " entries");
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    const auto& e = catalog[i];
    if (e.catalog_id != static_cast<int>(i)) throw std::invalid_argument("catalog ids must be 0..5 in order");
    if (e.driver_teeth < 8 || e.driven_teeth < 8) throw std::invalid_argument("gear teeth must be >= 8");
    if (!(e.price > 0)) throw std::invalid_argument("gear price must be positive");
    if (!(e.gear_radius_per_tooth > 0)) throw std::invalid_argument("gear radius per tooth must be positive");
  }
}

// ---------------------------------------------------------------------------
// Grammar

enum class FailureReason : std::uint8_t { none, missing_sos, missing_eos, bad_stage, no_gear, too_long, interior_pad };

inline std::string_view failure_name(FailureReason r) {
  switch (r) {
    case FailureReason::none: return "none";
    case FailureReason::missing_sos: return "missing_sos";
    case FailureReason::missing_eos: return "missing_eos";
    case FailureReason::bad_stage: return "bad_stage";
    case FailureReason::no_gear: return "no_gear";
    case FailureReason::too_long: return "too_long";
    case FailureReason::interior_pad: return "interior_pad";
  }
  return "?";
}

struct ValidityReport {
  bool is_valid = false;
  FailureReason failure_reason = FailureReason::missing_sos;
};

/// Single left-to-right scan; reports the first failure encountered.
inline ValidityReport validate_sequence(const DesignSequence& seq) {
  auto fail = [](FailureReason r) { return ValidityReport{false, r}; };
  if (seq.empty() || seq.front().kind() != TokenKind::sos) return fail(FailureReason::missing_sos);

  int stages = 0;
  int gears = 0;
  std::size_t i = 1;
  while (true) {
    if (i >= seq.size()) return fail(FailureReason::missing_eos);
    switch (seq[i].kind()) {
      case TokenKind::pad: return fail(FailureReason::interior_pad);
      case TokenKind::sos:
      case TokenKind::gear: return fail(FailureReason::bad_stage);
      case TokenKind::eos: {
        if (gears == 0) return fail(FailureReason::no_gear);
        for (std::size_t j = i + 1; j < seq.size(); ++j)
          if (seq[j].kind() != TokenKind::pad) return fail(FailureReason::bad_stage);
        return {true, FailureReason::none};
      }
      case TokenKind::shaft: {
        if (++stages > kMaxStages) return fail(FailureReason::too_long);
        ++i;
        if (i < seq.size() && seq[i].kind() == TokenKind::gear) {
          ++gears;
          ++i;
        }
        break;
      }
    }
  }
}

inline bool is_valid(const DesignSequence& seq) { return validate_sequence(seq).is_valid; }

inline constexpr double kGearProbability = 0.7;

/// Rule-based generator. Always returns a grammar-valid sequence.
inline DesignSequence random_design(Rng& rng, int max_stages = kMaxStages) {
  if (max_stages < 1 || max_stages > kMaxStages) throw std::invalid_argument("max_stages must be in [1, 20]");
  const int stages = uniform_int(rng, 1, max_stages);
  std::vector<int> shafts(static_cast<std::size_t>(stages));
  std::vector<int> gears(static_cast<std::size_t>(stages), -1);
  bool any_gear = false;
  for (int s = 0; s < stages; ++s) {
    shafts[static_cast<std::size_t>(s)] = uniform_int(rng, 0, kNumShaftVariants - 1);
    if (uniform01(rng) < kGearProbability) {
      gears[static_cast<std::size_t>(s)] = uniform_int(rng, 0, kNumGearVariants - 1);
      any_gear = true;
    }
  }
  if (!any_gear) {
    const int s = uniform_int(rng, 0, stages - 1);
    gears[static_cast<std::size_t>(s)] = uniform_int(rng, 0, kNumGearVariants - 1);
  }

  DesignSequence seq{Token::sos()};
  for (int s = 0; s < stages; ++s) {
    seq.push_back(Token::shaft(shafts[static_cast<std::size_t>(s)]));
    if (gears[static_cast<std::size_t>(s)] >= 0) seq.push_back(Token::gear(gears[static_cast<std::size_t>(s)]));
  }
  seq.push_back(Token::eos());
  return seq;
}

}  // namespace esimft
