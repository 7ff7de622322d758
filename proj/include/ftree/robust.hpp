#pragma once

// Distributionally robust expectations over a divergence ball
//   { q in simplex : sum_i (p_i - q_i)^2 / q_i <= theta }
// around nominal probabilities p, and robust backward solves built on them.
//
// The inner minimization of sum_i q_i v_i has stationary points
//   q_i = p_i sqrt(mu1) / sqrt(v_i + kappa),   kappa = mu1 + mu2,
// where normalization fixes sqrt(mu1) = 1 / E_p[(v + kappa)^(-1/2)] and an
// active divergence constraint reduces to the scalar equation
//   E_p[(v + kappa)^(1/2)] * E_p[(v + kappa)^(-1/2)] = 1 + theta,
// solved by bisection on log(kappa + min v).

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <sstream>
#include <vector>

#include "ftree/dp.hpp"
#include "ftree/errors.hpp"

namespace ftree {

struct AmbiguitySet {
  std::vector<double> nominal;
  double theta = 0.0;

  void validate() const {
    if (nominal.size() < 2) throw InputError("ambiguity set: need at least two outcomes");
    if (!(theta >= 0.0) || !std::isfinite(theta)) throw InputError("ambiguity set: theta must be a finite nonnegative number");
    double s = 0.0;
    for (double p : nominal) {
      if (!(p >= 0.0) || !std::isfinite(p)) throw InputError("ambiguity set: probabilities must be nonnegative");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw InputError("ambiguity set: probabilities must sum to 1");
  }
};

struct DualSolution {
  double mu1 = 0.0;
  double mu2 = 0.0;
  std::vector<double> y;  // sqrt(mu1 (v_i + mu1 + mu2))
  std::vector<double> q;  // worst-case probabilities
  double value = 0.0;       // sum_i q_i v_i
  double dual_value = 0.0;  // dual objective at (mu1, mu2)
  double divergence = 0.0;  // sum_i (p_i - q_i)^2 / q_i
  int iterations = 0;
  bool nominal = false;  // short-circuit: theta = 0 or constant values
};

/// Divergence sum_i (p_i - q_i)^2 / q_i, with 0/0 terms read as 0.
inline double divergence(std::span<const double> p, std::span<const double> q) {
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (q[i] > 0.0) {
      d += (p[i] - q[i]) * (p[i] - q[i]) / q[i];
    } else if (p[i] > 0.0) {
      return std::numeric_limits<double>::infinity();
    }
  }
  return d;
}

/// Minimizes sum_i q_i v_i over the ambiguity set through its two-multiplier dual.
inline DualSolution worst_case_weights(std::span<const double> v, const AmbiguitySet& set) {
  set.validate();
  const auto& p = set.nominal;
  if (v.size() != p.size()) throw InputError("worst case: values and probabilities differ in length");
  for (double x : v) {
    if (!std::isfinite(x)) throw InputError("worst case: non-finite value");
  }
  const std::size_t n = v.size();
  DualSolution out;
  double vmin = std::numeric_limits<double>::infinity();
  double vmax = -vmin, vabs = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    vabs = std::max(vabs, std::abs(v[i]));
    if (p[i] > 0.0) {
      vmin = std::min(vmin, v[i]);
      vmax = std::max(vmax, v[i]);
    }
  }
  if (set.theta == 0.0 || vmax - vmin <= 1e-14 * std::max(1.0, vabs)) {
    out.nominal = true;
    out.q = p;
    for (std::size_t i = 0; i < n; ++i) out.value += p[i] * v[i];
    out.dual_value = out.value;
    return out;
  }
  const double target = 1.0 + set.theta;
  // phi(delta) with v_i + kappa written as (v_i - vmin) + delta.
  auto phi = [&](double delta) {
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (p[i] == 0.0) continue;
      const double r = std::sqrt((v[i] - vmin) + delta);
      a += p[i] * r;
      b += p[i] / r;
    }
    return a * b;
  };
  const double spread = vmax - vmin;
  double lo = std::log(spread) - 80.0, hi = std::log(spread) + 80.0;
  while (phi(std::exp(lo)) <= target && lo > -700.0) lo -= 40.0;
  while (phi(std::exp(hi)) > target && hi < 700.0) hi += 40.0;
  for (out.iterations = 0; out.iterations < 400; ++out.iterations) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (phi(std::exp(mid)) > target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  const double delta = std::exp(0.5 * (lo + hi));
  double inv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (p[i] > 0.0) inv += p[i] / std::sqrt((v[i] - vmin) + delta);
  }
  const double root_mu1 = 1.0 / inv;
  out.mu1 = root_mu1 * root_mu1;
  const double kappa = delta - vmin;
  out.mu2 = kappa - out.mu1;
  out.q.assign(n, 0.0);
  out.y.assign(n, 0.0);
  double shifted = 0.0, dual_sum = 0.0, qsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = std::sqrt((v[i] - vmin) + delta);
    out.y[i] = root_mu1 * r;
    if (p[i] == 0.0) continue;
    out.q[i] = p[i] * root_mu1 / r;
    qsum += out.q[i];
    shifted += out.q[i] * (v[i] - vmin);
    dual_sum += 2.0 * p[i] * out.y[i];
  }
  out.value = vmin + shifted;
  out.dual_value = dual_sum - out.mu1 * target - delta + vmin;
  out.divergence = divergence(p, out.q);

  const double tol = 1e-8;
  const double scale = std::max(1.0, vabs);
  if (std::abs(qsum - 1.0) > tol || out.divergence > set.theta + tol ||
      std::abs(out.value - out.dual_value) > tol * scale) {
    std::ostringstream os;
    os.precision(17);
    os << "worst case dual failed its invariants: sum q = " << qsum
       << ", divergence = " << out.divergence << " (theta " << set.theta
       << "), primal = " << out.value << ", dual = " << out.dual_value << ", mu1 = " << out.mu1
       << ", mu2 = " << out.mu2;
    throw DualSolveError(os.str());
  }
  return out;
}

inline double worst_case_expectation(std::span<const double> v, const AmbiguitySet& set) {
  return worst_case_weights(v, set).value;
}

/// Aggregator for the backward solves: the adversary lowers the expectation
/// of a maximization and raises that of a minimization. theta = 0 reduces to
/// nominal_aggregate exactly.
inline Aggregator robust_aggregate(double theta) {
  if (!(theta >= 0.0) || !std::isfinite(theta)) throw InputError("robust: theta must be a finite nonnegative number");
  return [theta](std::span<const double> values, std::span<const double> probs, Sense sense) {
    if (theta == 0.0 || values.size() < 2) return nominal_aggregate(values, probs, sense);
    AmbiguitySet set{{probs.begin(), probs.end()}, theta};
    Aggregate a;
    if (sense == Sense::Maximize) {
      auto sol = worst_case_weights(values, set);
      a.value = sol.value;
      a.weights = std::move(sol.q);
    } else {
      std::vector<double> neg(values.size());
      for (std::size_t i = 0; i < values.size(); ++i) neg[i] = -values[i];
      auto sol = worst_case_weights(neg, set);
      a.value = -sol.value;
      a.weights = std::move(sol.q);
    }
    return a;
  };
}

inline PolicySolution robust_backward_solve(const StageModel& model, const ScenarioTree& tree,
                                            const TrajectorySet& traj, double theta,
                                            DpOptions opt = {}) {
  opt.aggregate = robust_aggregate(theta);
  return backward_solve(model, tree, traj, opt);
}

struct ThetaRow {
  double theta = 0.0;
  double value = 0.0;
  Decision decision;  // root decision
};

inline std::vector<ThetaRow> theta_sweep(const StageModel& model, const ScenarioTree& tree,
                                         const TrajectorySet& traj, std::span<const double> thetas,
                                         const DpOptions& opt = {}) {
  if (thetas.empty()) throw InputError("theta sweep: empty theta list");
  std::vector<ThetaRow> rows;
  for (double theta : thetas) {
    const auto sol = robust_backward_solve(model, tree, traj, theta, opt);
    rows.push_back({theta, sol.value(), sol.root().points.front().decision});
  }
  return rows;
}

}  // namespace ftree
