#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace dynpen {

/// A scalar inequality residual g(x, u); the point is feasible iff g <= 0.
using ResidualFn = std::function<double(std::span<const double> state, double action)>;

/// An ordered list of inequality residuals plus the aggregation sharpness rho.
struct ConstraintSet {
  std::vector<ResidualFn> residuals;
  double rho = 50.0;

  std::size_t size() const { return residuals.size(); }
};

inline void check_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw std::domain_error(std::string(what) + " must be finite");
  }
}

/// Evaluate every residual of `cs` at (state, action), in list order.
inline std::vector<double> evaluate_residuals(const ConstraintSet& cs,
                                              std::span<const double> state,
                                              double action) {
  check_finite(state, "state");
  if (!std::isfinite(action)) throw std::domain_error("action must be finite");
  std::vector<double> out;
  out.reserve(cs.residuals.size());
  for (const auto& g : cs.residuals) out.push_back(g(state, action));
  return out;
}

/// Kreisselmeier-Steinhauser aggregate of inequality residuals:
///   g_max + (1/rho) * ln(sum_i exp(rho * (g_i - g_max)))
/// Every exponent argument is <= 0, so the sum cannot overflow. Terms are
/// accumulated in sorted order, which makes the result independent of the
/// input ordering.
inline double ks_aggregate(std::span<const double> residuals, double rho) {
  if (residuals.empty()) throw std::invalid_argument("ks_aggregate: empty residual vector");
  if (!(rho > 0.0)) throw std::invalid_argument("ks_aggregate: rho must be positive");
  check_finite(residuals, "residuals");

  std::vector<double> sorted(residuals.begin(), residuals.end());
  std::sort(sorted.begin(), sorted.end());
  const double g_max = sorted.back();
  double sum = 0.0;
  for (double g : sorted) sum += std::exp(rho * (g - g_max));
  return g_max + std::log(sum) / rho;
}

inline double ks_aggregate(const ConstraintSet& cs, std::span<const double> state,
                           double action) {
  const auto r = evaluate_residuals(cs, state, action);
  return ks_aggregate(r, cs.rho);
}

}  // namespace dynpen
