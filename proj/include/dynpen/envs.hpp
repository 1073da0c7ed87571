#pragma once

#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dynpen/constraints.hpp"
#include "dynpen/penalty.hpp"
#include "dynpen/rng.hpp"

namespace dynpen {

// ---------------------------------------------------------------------------
// Double-integrator vehicle
// ---------------------------------------------------------------------------

/// Raw vehicle state. Values are never clamped: leaving the admissible box is
/// penalized, not prevented.
struct VehicleState {
  double position = 0.0;
  double velocity = 0.0;

  std::array<double, 2> as_array() const { return {position, velocity}; }
};

/// The 41-point acceleration grid {-0.25, -0.2375, ..., 0.2375, 0.25}.
class ActionGrid {
public:
  ActionGrid() {
    values_.resize(41);
    for (int i = 0; i < 41; ++i) values_[i] = static_cast<double>(i - 20) * 0.0125;
  }

  int size() const { return static_cast<int>(values_.size()); }
  double value(int index) const {
    if (index < 0 || index >= size())
      throw std::out_of_range("ActionGrid: action index out of range");
    return values_[static_cast<std::size_t>(index)];
  }
  std::span<const double> values() const { return values_; }

private:
  std::vector<double> values_;
};

enum class Integrator { kForwardEuler, kZeroOrderHold };

struct VehicleEnvConfig {
  double dt = 1.0;
  Integrator integrator = Integrator::kForwardEuler;
  double rho = 50.0;
  // admissible box
  double position_min = -1.0;
  double position_max = 1.0;
  double velocity_min = -0.25;
  double velocity_max = 1.0;
  // initial-state rectangle (same as the admissible box in the case study)
  double init_position_min = -1.0;
  double init_position_max = 1.0;
  double init_velocity_min = -0.25;
  double init_velocity_max = 1.0;
  int horizon = 20;
};

/// Discrete-action double integrator: position follows velocity, velocity
/// follows the chosen acceleration, one step per control interval. The stage
/// cost is position^2 + action^2 at the current state; the constraint
/// aggregate is evaluated at the state the action leads to.
class VehicleEnv {
public:
  explicit VehicleEnv(VehicleEnvConfig config = {}) : config_(config) {
    if (!(config.dt > 0.0)) throw std::invalid_argument("VehicleEnv: dt must be positive");
    if (config.horizon < 1) throw std::invalid_argument("VehicleEnv: horizon must be >= 1");
    // Box constraints decomposed into one residual per face, g <= 0 feasible.
    auto pos_min = config.position_min, pos_max = config.position_max;
    auto vel_min = config.velocity_min, vel_max = config.velocity_max;
    constraints_.rho = config.rho;
    constraints_.residuals = {
        [pos_min](std::span<const double> s, double) { return pos_min - s[0]; },
        [pos_max](std::span<const double> s, double) { return s[0] - pos_max; },
        [vel_min](std::span<const double> s, double) { return vel_min - s[1]; },
        [vel_max](std::span<const double> s, double) { return s[1] - vel_max; },
    };
  }

  const VehicleEnvConfig& config() const { return config_; }
  const ActionGrid& actions() const { return actions_; }
  const ConstraintSet& constraints() const { return constraints_; }
  int horizon() const { return config_.horizon; }

  std::vector<double> residuals(const VehicleState& s) const {
    const auto arr = s.as_array();
    return evaluate_residuals(constraints_, arr, 0.0);
  }

  bool violates(const VehicleState& s) const {
    for (double g : residuals(s))
      if (g > 0.0) return true;
    return false;
  }

  double stage_cost(const VehicleState& s, double action) const {
    return s.position * s.position + action * action;
  }

  struct StepResult {
    VehicleState next;
    double stage_cost = 0.0;
    double ks = 0.0;
  };

  StepResult step(const VehicleState& s, int action_index) const {
    const double u = actions_.value(action_index);
    const double dt = config_.dt;
    VehicleState next;
    if (config_.integrator == Integrator::kForwardEuler) {
      next.position = s.position + s.velocity * dt;
      next.velocity = s.velocity + u * dt;
    } else {
      next.position = s.position + s.velocity * dt + 0.5 * u * dt * dt;
      next.velocity = s.velocity + u * dt;
    }
    StepResult r;
    r.next = next;
    r.stage_cost = stage_cost(s, u);
    const auto arr = next.as_array();
    r.ks = ks_aggregate(constraints_, arr, u);
    return r;
  }

  VehicleState sample_initial(Rng& rng) const {
    VehicleState s;
    s.position = rng.uniform(config_.init_position_min, config_.init_position_max);
    s.velocity = rng.uniform(config_.init_velocity_min, config_.init_velocity_max);
    return s;
  }

private:
  VehicleEnvConfig config_;
  ActionGrid actions_;
  ConstraintSet constraints_;
};

/// The agent maximizes return while the control objective minimizes cost, so
/// the reward is the negated penalized stage cost.
inline double reward(double stage_cost, double ks, const Penalty& kind) {
  if (!std::isfinite(stage_cost) || !std::isfinite(ks))
    throw std::domain_error("reward: inputs must be finite");
  return -(stage_cost + kind.value(ks));
}

// ---------------------------------------------------------------------------
// 1-D regression target
// ---------------------------------------------------------------------------

struct RegressionTargetConfig {
  double bound_lo = -5.0;
  double bound_hi = 5.0;
  double sample_lo = -10.0;
  double sample_hi = 10.0;
  int samples_per_episode = 20;
};

/// Objective part of the 1-D target: 1 + cos(0.5 x) + 0.05 (x - 1)(x + 2).
inline double objective_1d(double x) {
  return 1.0 + std::cos(0.5 * x) + 0.05 * (x - 1.0) * (x + 2.0);
}

/// Magnitude of the bound violation; 0 inside [lo, hi].
inline double bound_violation(double x, double lo, double hi) {
  if (x < lo) return lo - x;
  if (x > hi) return x - hi;
  return 0.0;
}

/// Penalized target value: objective plus the priced violation of [-5, 5].
inline double target_value_1d(double x, const Penalty& kind,
                              const RegressionTargetConfig& cfg = {}) {
  if (!std::isfinite(x)) throw std::domain_error("target_value_1d: x must be finite");
  const double v = bound_violation(x, cfg.bound_lo, cfg.bound_hi);
  return objective_1d(x) + kind.value(v);
}

/// Draw one episode of (x, target) pairs, x ~ U(sample_lo, sample_hi) i.i.d.
inline std::vector<std::pair<double, double>> sample_episode_1d(
    Rng& rng, const Penalty& kind, const RegressionTargetConfig& cfg = {}) {
  std::vector<std::pair<double, double>> out;
  out.reserve(static_cast<std::size_t>(cfg.samples_per_episode));
  for (int i = 0; i < cfg.samples_per_episode; ++i) {
    const double x = rng.uniform(cfg.sample_lo, cfg.sample_hi);
    out.emplace_back(x, target_value_1d(x, kind, cfg));
  }
  return out;
}

}  // namespace dynpen
