#pragma once

// Forward evaluation of design sequences into requirement metrics, plus the
// violation / normalization / reward functions built on top of it.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>

#include "esimft/gear_domain.hpp"

namespace esimft {

using Vec3 = std::array<double, 3>;

inline double distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

inline constexpr double kBBoxExtentFloor = 0.05;  // m
inline constexpr double kShaftCostPerMeter = 10.0;

struct SimulationResult {
  double speed_ratio = 1.0;
  double log_speed_ratio = 0.0;
  Vec3 output_position{0.0, 0.0, 0.0};
  double bbox_volume = 0.0;
  double cost = 0.0;
  bool valid = false;

  bool operator==(const SimulationResult&) const = default;
};

/// Walks the token list carrying (position, flow axis, ratio). Shafts translate
/// along the flow axis; gears multiply the ratio and, when perpendicular, rotate
/// the axis +x -> +y -> +z -> +x. Gears do not displace the position.
inline SimulationResult simulate(const DesignSequence& seq, const GearCatalog& catalog = default_catalog()) {
  SimulationResult out;
  if (!is_valid(seq)) return out;

  Vec3 p{0.0, 0.0, 0.0};
  int axis = 0;
  double ratio = 1.0;
  double cost = 0.0;
  Vec3 lo = p, hi = p;
  auto cover = [&](const Vec3& q, double half) {
    for (int d = 0; d < 3; ++d) {
      lo[static_cast<std::size_t>(d)] = std::min(lo[static_cast<std::size_t>(d)], q[static_cast<std::size_t>(d)] - half);
      hi[static_cast<std::size_t>(d)] = std::max(hi[static_cast<std::size_t>(d)], q[static_cast<std::size_t>(d)] + half);
    }
  };

  for (auto t : seq) {
    if (t.kind() == TokenKind::eos) break;
    if (t.kind() == TokenKind::shaft) {
      const double len = t.shaft_length();
      p[static_cast<std::size_t>(axis)] += len;
      cost += len * kShaftCostPerMeter;
      cover(p, 0.0);
    } else if (t.kind() == TokenKind::gear) {
      const auto& g = catalog.at(static_cast<std::size_t>(t.gear_id()));
      ratio *= g.ratio();
      cost += g.price;
      cover(p, g.driven_teeth * g.gear_radius_per_tooth);
      if (g.axis_effect == AxisEffect::perpendicular) axis = (axis + 1) % 3;
    }
  }

  double volume = 1.0;
  for (int d = 0; d < 3; ++d)
    volume *= std::max(hi[static_cast<std::size_t>(d)] - lo[static_cast<std::size_t>(d)], kBBoxExtentFloor);

  out.speed_ratio = ratio;
  out.log_speed_ratio = std::log(ratio);
  out.output_position = p;
  out.bbox_volume = volume;
  out.cost = cost;
  out.valid = true;
  return out;
}

// ---------------------------------------------------------------------------
// Requirements

enum class RequirementKind : std::uint8_t { speed, position, bbox, cost };
enum class RequirementMode : std::uint8_t { equality, upper_bound };

inline constexpr std::array<RequirementKind, 4> kAllRequirementKinds{
    RequirementKind::speed, RequirementKind::position, RequirementKind::bbox, RequirementKind::cost};

inline std::string_view kind_name(RequirementKind k) {
  switch (k) {
    case RequirementKind::speed: return "speed";
    case RequirementKind::position: return "position";
    case RequirementKind::bbox: return "bbox";
    case RequirementKind::cost: return "cost";
  }
  return "?";
}

inline RequirementKind parse_kind(std::string_view s) {
  for (auto k : kAllRequirementKinds)
    if (kind_name(k) == s) return k;
  throw std::invalid_argument("unknown requirement kind '" + std::string(s) + "'");
}

inline constexpr RequirementMode mode_of(RequirementKind k) {
  return (k == RequirementKind::speed || k == RequirementKind::position) ? RequirementMode::equality
                                                                         : RequirementMode::upper_bound;
}

inline constexpr bool is_original(RequirementKind k) { return mode_of(k) == RequirementMode::equality; }

/// Normalization constants s (same units as the raw violation).
struct ViolationScales {
  double speed = 0.5;      // log units
  double position = 0.3;   // m
  double bbox = 0.05;      // m^3
  double cost = 10.0;      // currency

  double of(RequirementKind k) const {
    switch (k) {
      case RequirementKind::speed: return speed;
      case RequirementKind::position: return position;
      case RequirementKind::bbox: return bbox;
      case RequirementKind::cost: return cost;
    }
    return 1.0;
  }
};

struct RequirementSpec {
  RequirementKind kind = RequirementKind::speed;
  RequirementMode mode = RequirementMode::equality;
  double target = 0.0;         // log-ratio, or bound in native units
  Vec3 target_position{};      // position only
  double scale = 1.0;

  static RequirementSpec speed(double log_ratio_target, double scale) {
    return make(RequirementKind::speed, log_ratio_target, {}, scale);
  }
  static RequirementSpec position(const Vec3& target, double scale) {
    return make(RequirementKind::position, 0.0, target, scale);
  }
  static RequirementSpec bbox(double bound, double scale) { return make(RequirementKind::bbox, bound, {}, scale); }
  static RequirementSpec cost(double bound, double scale) { return make(RequirementKind::cost, bound, {}, scale); }

 private:
  static RequirementSpec make(RequirementKind k, double target, Vec3 pos, double scale) {
    if (!(scale > 0)) throw std::invalid_argument("requirement scale must be positive");
    return RequirementSpec{k, mode_of(k), target, pos, scale};
  }
};

/// The simulated value of an inequality requirement.
inline double requirement_value(const SimulationResult& r, RequirementKind k) {
  switch (k) {
    case RequirementKind::bbox: return r.bbox_volume;
    case RequirementKind::cost: return r.cost;
    case RequirementKind::speed: return r.log_speed_ratio;
    case RequirementKind::position: break;
  }
  throw std::invalid_argument("position has no scalar requirement value");
}

/// Raw violation in native units.
inline double violation(const SimulationResult& r, const RequirementSpec& req) {
  if (!r.valid) throw std::invalid_argument("cannot score invalid design");
  switch (req.kind) {
    case RequirementKind::speed: return std::abs(r.log_speed_ratio - req.target);
    case RequirementKind::position: return distance(r.output_position, req.target_position);
    case RequirementKind::bbox: return std::max(0.0, r.bbox_volume - req.target);
    case RequirementKind::cost: return std::max(0.0, r.cost - req.target);
  }
  return 0.0;
}

/// v / (v + s): 0 at v = 0, 1/2 at v = s, tends to 1.
inline double normalize_violation(double v, double scale) {
  if (!(v >= 0)) throw std::invalid_argument("violation must be non-negative");
  if (!(scale > 0)) throw std::invalid_argument("scale must be positive");
  if (std::isinf(v)) return 1.0;
  return v / (v + scale);
}

enum class RewardMode : std::uint8_t { continuous, binary };

/// Reward in [-1, 1] for an upper-bound requirement. The continuous form is
/// 1 - 2d/(1+d) on the scale-normalized excess d = (value - bound) / scale.
inline double reward(const SimulationResult& r, const RequirementSpec& req, RewardMode mode) {
  if (req.mode != RequirementMode::upper_bound)
    throw std::invalid_argument("reward is defined only for upper-bound requirements");
  if (!r.valid) return -1.0;
  const double excess = requirement_value(r, req.kind) - req.target;
  if (excess <= 0) return 1.0;
  if (mode == RewardMode::binary) return -1.0;
  const double d = excess / req.scale;
  if (std::isinf(d)) return -1.0;
  return 1.0 - 2.0 * d / (1.0 + d);
}

}  // namespace esimft
