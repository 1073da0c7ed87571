#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <memory>
#include <stdexcept>

namespace dynpen {

enum class PenaltyKind { kUniform, kLinear, kDynamic };

enum class ScheduleEvent { kUnchanged, kUpdated, kSaturated };

/// Growth state machine for the dynamic penalty factor.
///
/// The factor mu starts at mu_min and is multiplied by `growth` whenever an
/// observed training loss drops strictly below (100 - trigger_alpha)% of the
/// largest loss seen since the previous change of mu. Once mu would exceed
/// mu_max it is clamped there and never moves again.
class PenaltySchedule {
public:
  PenaltySchedule(double mu_min, double mu_max, double growth, double trigger_alpha)
      : mu_min_(mu_min), mu_max_(mu_max), growth_(growth), alpha_(trigger_alpha),
        mu_(mu_min) {
    if (!(mu_min > 0.0) || !(mu_max >= mu_min))
      throw std::invalid_argument("PenaltySchedule: need 0 < mu_min <= mu_max");
    if (!(growth > 1.0))
      throw std::invalid_argument("PenaltySchedule: growth factor must be > 1");
    if (!(trigger_alpha > 0.0) || !(trigger_alpha < 100.0))
      throw std::invalid_argument("PenaltySchedule: trigger_alpha must lie in (0, 100)");
  }

  /// Feed one post-update loss value. Returns what happened to mu.
  ScheduleEvent observe(double loss) {
    if (!std::isfinite(loss) || loss < 0.0)
      throw std::domain_error("PenaltySchedule::observe: loss must be finite and >= 0");
    max_loss_seen_ = std::max(max_loss_seen_, loss);
    if (saturated_) return ScheduleEvent::kUnchanged;
    const double threshold = (100.0 - alpha_) / 100.0 * max_loss_seen_;
    if (!(loss < threshold)) return ScheduleEvent::kUnchanged;

    mu_ *= growth_;
    max_loss_seen_ = loss;  // track the new update period from here
    if (mu_ >= mu_max_) {
      mu_ = mu_max_;
      saturated_ = true;
      return ScheduleEvent::kSaturated;
    }
    return ScheduleEvent::kUpdated;
  }

  double mu() const { return mu_; }
  double mu_min() const { return mu_min_; }
  double mu_max() const { return mu_max_; }
  double growth() const { return growth_; }
  double trigger_alpha() const { return alpha_; }
  double max_loss_seen() const { return max_loss_seen_; }
  bool saturated() const { return saturated_; }

private:
  double mu_min_;
  double mu_max_;
  double growth_;
  double alpha_;
  double mu_;
  double max_loss_seen_ = 0.0;
  bool saturated_ = false;
};

/// Prices an aggregated constraint violation. Feasible points (ks <= 0) cost
/// nothing under every kind; infeasible points cost a flat level (uniform),
/// a fixed slope (linear), or the schedule's current slope (dynamic).
class Penalty {
public:
  static Penalty uniform(double level) {
    check_nonneg(level);
    Penalty p;
    p.kind_ = PenaltyKind::kUniform;
    p.coefficient_ = level;
    return p;
  }

  static Penalty linear(double factor) {
    check_nonneg(factor);
    Penalty p;
    p.kind_ = PenaltyKind::kLinear;
    p.coefficient_ = factor;
    return p;
  }

  static Penalty dynamic(std::shared_ptr<PenaltySchedule> schedule) {
    if (!schedule) throw std::invalid_argument("Penalty::dynamic: null schedule");
    Penalty p;
    p.kind_ = PenaltyKind::kDynamic;
    p.schedule_ = std::move(schedule);
    return p;
  }

  PenaltyKind kind() const { return kind_; }

  /// The coefficient currently in effect (level, factor, or live mu).
  double coefficient() const {
    return kind_ == PenaltyKind::kDynamic ? schedule_->mu() : coefficient_;
  }

  double value(double ks) const {
    if (!std::isfinite(ks)) throw std::domain_error("penalty_value: ks must be finite");
    if (ks <= 0.0) return 0.0;
    switch (kind_) {
      case PenaltyKind::kUniform: return coefficient_;
      case PenaltyKind::kLinear: return coefficient_ * ks;
      case PenaltyKind::kDynamic: return schedule_->mu() * ks;
    }
    return 0.0;
  }

  const std::shared_ptr<PenaltySchedule>& schedule() const { return schedule_; }

private:
  static void check_nonneg(double v) {
    if (!(v >= 0.0)) throw std::invalid_argument("Penalty: coefficient must be >= 0");
  }

  PenaltyKind kind_ = PenaltyKind::kUniform;
  double coefficient_ = 0.0;
  std::shared_ptr<PenaltySchedule> schedule_;
};

inline double penalty_value(const Penalty& kind, double ks) { return kind.value(ks); }

/// Mean over a sliding window of the last `window` values; used to smooth the
/// loss stream fed to a PenaltySchedule. Window 1 passes values through.
class MovingAverage {
public:
  explicit MovingAverage(std::size_t window) : window_(window == 0 ? 1 : window) {}

  double push(double v) {
    values_.push_back(v);
    sum_ += v;
    if (values_.size() > window_) {
      sum_ -= values_.front();
      values_.pop_front();
    }
    return sum_ / static_cast<double>(values_.size());
  }

private:
  std::size_t window_;
  std::deque<double> values_;
  double sum_ = 0.0;
};

}  // namespace dynpen
