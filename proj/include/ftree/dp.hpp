#pragma once

// Backward dynamic programming on a scenario tree with an endogenous state.
//
// Decision stage d = 0..T-1 is taken at the tree nodes of stage d (the virtual
// root for d = 0). The root is solved at the initial state only. Every other
// decision node is solved at the K sampled trajectory states of its stage and
// its values are interpolated by a shape-constrained quadratic (or linear)
// value function, which becomes the continuation of the stage above. Leaves
// are valued by the model's terminal function.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ftree/detail/active_set_qp.hpp"
#include "ftree/detail/parallel.hpp"
#include "ftree/detail/random.hpp"
#include "ftree/errors.hpp"
#include "ftree/tree.hpp"

namespace ftree {

using State = Eigen::VectorXd;
using Decision = Eigen::VectorXd;

enum class ValueForm { Linear, Quadratic };
enum class Orientation { ConvexIncreasing, ConcaveIncreasing };
enum class Sense { Minimize, Maximize };

inline std::string_view to_string(ValueForm f) {
  return f == ValueForm::Linear ? "linear" : "quadratic";
}
inline std::string_view to_string(Orientation o) {
  return o == Orientation::ConvexIncreasing ? "convex-increasing" : "concave-increasing";
}
inline std::string_view to_string(Sense s) { return s == Sense::Minimize ? "minimize" : "maximize"; }

// ---------------------------------------------------------------------------
// Value functions

/// Quadratic: V(s) = s'As + 2b's + c. Linear: V(s) = b's + c (A unused).
struct ValueFunction {
  ValueForm form = ValueForm::Quadratic;
  Orientation orientation = Orientation::ConcaveIncreasing;
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  double c = 0.0;

  [[nodiscard]] std::size_t state_dim() const { return static_cast<std::size_t>(b.size()); }

  [[nodiscard]] double operator()(const State& s) const {
    if (form == ValueForm::Linear) return b.dot(s) + c;
    return s.dot(A * s) + 2.0 * b.dot(s) + c;
  }

  [[nodiscard]] Eigen::VectorXd gradient(const State& s) const {
    if (form == ValueForm::Linear) return b;
    return 2.0 * (A * s + b);
  }

  /// Multiplies the function by r (all coefficients).
  [[nodiscard]] ValueFunction scaled(double r) const {
    ValueFunction v = *this;
    v.A *= r;
    v.b *= r;
    v.c *= r;
    return v;
  }
};

struct OrientationCheck {
  double min_signed_eigenvalue = 0.0;  // of A (convex) or -A (concave)
  double min_slope = 0.0;              // min over samples and components of A s + b
  [[nodiscard]] bool ok(double tol = 1e-9) const {
    return min_signed_eigenvalue >= -tol && min_slope >= -tol;
  }
};

/// Evaluates the orientation invariants of a quadratic fit at the given states.
inline OrientationCheck check_orientation(const ValueFunction& v, std::span<const State> states) {
  OrientationCheck r;
  if (v.form == ValueForm::Linear) {
    r.min_slope = v.b.size() > 0 ? v.b.minCoeff() : 0.0;
    return r;
  }
  const double sign = v.orientation == Orientation::ConvexIncreasing ? 1.0 : -1.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sign * v.A);
  r.min_signed_eigenvalue = eig.eigenvalues().minCoeff();
  r.min_slope = std::numeric_limits<double>::infinity();
  for (const auto& s : states) r.min_slope = std::min(r.min_slope, (v.A * s + v.b).minCoeff());
  if (states.empty()) r.min_slope = 0.0;
  return r;
}

struct FitResult {
  ValueFunction function;
  double objective = 0.0;                // sum of squared residuals
  double unconstrained_objective = 0.0;  // least squares without shape constraints
  bool constraints_active = false;
  int iterations = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::size_t quadratic_param_count(std::size_t r) { return r * (r + 1) / 2 + r + 1; }

/// Feature row for s'As + 2b's + c with parameters (upper A row-wise, b, c).
inline Eigen::RowVectorXd quadratic_features(const State& s) {
  const auto r = static_cast<std::size_t>(s.size());
  Eigen::RowVectorXd f(static_cast<Eigen::Index>(quadratic_param_count(r)));
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    for (Eigen::Index j = i; j < s.size(); ++j) f(k++) = (i == j ? 1.0 : 2.0) * s(i) * s(j);
  }
  for (Eigen::Index i = 0; i < s.size(); ++i) f(k++) = 2.0 * s(i);
  f(k) = 1.0;
  return f;
}

inline void unpack_quadratic(const Eigen::VectorXd& theta, std::size_t r, ValueFunction& v) {
  const auto n = static_cast<Eigen::Index>(r);
  v.A = Eigen::MatrixXd::Zero(n, n);
  v.b = Eigen::VectorXd::Zero(n);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      v.A(i, j) = theta(k);
      v.A(j, i) = theta(k);
      ++k;
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) v.b(i) = theta(k++);
  v.c = theta(k);
}

/// Row of the linear map theta -> (A s + b)_i.
inline Eigen::RowVectorXd slope_row(const State& s, Eigen::Index i) {
  const auto r = static_cast<std::size_t>(s.size());
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(quadratic_param_count(r)));
  Eigen::Index k = 0;
  for (Eigen::Index a = 0; a < s.size(); ++a) {
    for (Eigen::Index b = a; b < s.size(); ++b) {
      if (a == i) row(k) += s(b);
      else if (b == i) row(k) += s(a);
      ++k;
    }
  }
  row(k + i) = 1.0;
  return row;
}

/// Row of the linear map theta -> v'Av.
inline Eigen::RowVectorXd curvature_row(const Eigen::VectorXd& v) {
  const auto r = static_cast<std::size_t>(v.size());
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(quadratic_param_count(r)));
  Eigen::Index k = 0;
  for (Eigen::Index a = 0; a < v.size(); ++a) {
    for (Eigen::Index b = a; b < v.size(); ++b) row(k++) = (a == b ? 1.0 : 2.0) * v(a) * v(b);
  }
  return row;
}

}  // namespace detail

/// Least-squares fit of a value function to (state, value) samples. The
/// quadratic form is constrained to the orientation's curvature sign and to
/// A s + b >= 0 at every sample; the linear form is unconstrained.
inline FitResult fit_value_function(std::span<const State> states, std::span<const double> values,
                                    ValueForm form, Orientation orientation) {
  if (states.size() != values.size()) throw InputError("fit: states and values differ in length");
  if (states.empty()) throw InputError("fit: no samples");
  const auto r = static_cast<std::size_t>(states.front().size());
  if (r == 0) throw InputError("fit: state dimension is zero");
  for (const auto& s : states) {
    if (static_cast<std::size_t>(s.size()) != r) throw InputError("fit: inconsistent state dimension");
    if (!s.allFinite()) throw InputError("fit: non-finite state");
  }
  for (double y : values) {
    if (!std::isfinite(y)) throw InputError("fit: non-finite value");
  }
  const std::size_t K = states.size();
  const std::size_t need = form == ValueForm::Quadratic ? r + 2 : 2;
  if (K < need) {
    std::ostringstream os;
    os << "fit: " << to_string(form) << " form needs at least " << need << " samples, got " << K;
    throw InputError(os.str());
  }

  // Normalized coordinates: every state component and the values are divided
  // by their largest magnitude.
  const auto rn = static_cast<Eigen::Index>(r);
  Eigen::VectorXd sigma = Eigen::VectorXd::Zero(rn);
  for (const auto& s : states) sigma = sigma.cwiseMax(s.cwiseAbs());
  for (Eigen::Index i = 0; i < rn; ++i) {
    if (sigma(i) == 0.0) sigma(i) = 1.0;
  }
  double ys = 0.0;
  for (double y : values) ys = std::max(ys, std::abs(y));
  if (ys == 0.0) ys = 1.0;
  std::vector<State> sn(K);
  Eigen::VectorXd y(static_cast<Eigen::Index>(K));
  for (std::size_t k = 0; k < K; ++k) {
    sn[k] = states[k].cwiseQuotient(sigma);
    y(static_cast<Eigen::Index>(k)) = values[k] / ys;
  }

  FitResult out;
  out.function.form = form;
  out.function.orientation = orientation;
  const auto Ki = static_cast<Eigen::Index>(K);

  if (form == ValueForm::Linear) {
    Eigen::MatrixXd Phi(Ki, rn + 1);
    for (Eigen::Index k = 0; k < Ki; ++k) {
      Phi.block(k, 0, 1, rn) = sn[static_cast<std::size_t>(k)].transpose();
      Phi(k, rn) = 1.0;
    }
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(Phi);
    cod.setThreshold(1e-10);
    if (cod.rank() < Phi.cols()) out.warnings.push_back("fit: rank-deficient samples, pseudo-inverse solution");
    const Eigen::VectorXd theta = cod.solve(y);
    out.function.A = Eigen::MatrixXd::Zero(rn, rn);
    out.function.b = ys * theta.head(rn).cwiseQuotient(sigma);
    out.function.c = ys * theta(rn);
    out.objective = ys * ys * (Phi * theta - y).squaredNorm();
    out.unconstrained_objective = out.objective;
    return out;
  }

  const auto p = static_cast<Eigen::Index>(detail::quadratic_param_count(r));
  Eigen::MatrixXd Phi(Ki, p);
  for (Eigen::Index k = 0; k < Ki; ++k) Phi.row(k) = detail::quadratic_features(sn[static_cast<std::size_t>(k)]);

  auto to_original = [&](const Eigen::VectorXd& theta) {
    ValueFunction v;
    v.form = form;
    v.orientation = orientation;
    detail::unpack_quadratic(theta, r, v);
    const Eigen::VectorXd inv = sigma.cwiseInverse();
    v.A = ys * inv.asDiagonal() * v.A * inv.asDiagonal();
    v.b = ys * inv.cwiseProduct(v.b);
    v.c = ys * v.c;
    return v;
  };
  const double sign = orientation == Orientation::ConvexIncreasing ? 1.0 : -1.0;
  auto violation = [&](const Eigen::VectorXd& theta, Eigen::VectorXd* direction) {
    ValueFunction v;
    detail::unpack_quadratic(theta, r, v);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sign * v.A);
    if (direction != nullptr) *direction = eig.eigenvectors().col(0);
    double worst = std::min(0.0, eig.eigenvalues()(0));
    for (const auto& s : sn) worst = std::min(worst, (v.A * s + v.b).minCoeff());
    return -worst;
  };

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Phi);
  qr.setThreshold(1e-10);
  const bool deficient = qr.rank() < p;
  Eigen::VectorXd theta_ls;
  if (deficient) {
    out.warnings.push_back("fit: rank-deficient samples, pseudo-inverse solution");
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(Phi);
    cod.setThreshold(1e-10);
    theta_ls = cod.solve(y);
  } else {
    theta_ls = qr.solve(y);
  }
  out.unconstrained_objective = ys * ys * (Phi * theta_ls - y).squaredNorm();
  const double feas_tol = 1e-12 * (1.0 + theta_ls.cwiseAbs().maxCoeff());
  if (violation(theta_ls, nullptr) <= feas_tol) {
    out.function = to_original(theta_ls);
    out.objective = out.unconstrained_objective;
    return out;
  }

  // Constrained fit: sample slopes plus curvature cuts, starting with the
  // coordinate directions and adding the most violated eigenvector.
  Eigen::MatrixXd H = Phi.transpose() * Phi;
  if (deficient) H += 1e-10 * std::max(1.0, H.trace() / static_cast<double>(p)) * Eigen::MatrixXd::Identity(p, p);
  const Eigen::VectorXd g = Phi.transpose() * y;
  std::vector<Eigen::RowVectorXd> rows;
  for (const auto& s : sn) {
    for (Eigen::Index i = 0; i < rn; ++i) rows.push_back(detail::slope_row(s, i));
  }
  for (Eigen::Index i = 0; i < rn; ++i) {
    rows.push_back(sign * detail::curvature_row(Eigen::VectorXd::Unit(rn, i)));
  }
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(p);
  out.constraints_active = true;
  bool done = false;
  for (int round = 0; round < 50 && !done; ++round) {
    Eigen::MatrixXd C(static_cast<Eigen::Index>(rows.size()), p);
    for (std::size_t i = 0; i < rows.size(); ++i) C.row(static_cast<Eigen::Index>(i)) = rows[i];
    const Eigen::VectorXd d = Eigen::VectorXd::Zero(C.rows());
    const auto qp = detail::solve_qp_active_set(H, g, C, d, Eigen::VectorXd::Zero(p), 1e-11);
    out.iterations += qp.iterations;
    if (!qp.converged) out.warnings.push_back("fit: active-set iteration cap reached");
    theta = qp.x;
    Eigen::VectorXd dir;
    if (violation(theta, &dir) <= feas_tol) {
      done = true;
    } else {
      rows.push_back(sign * detail::curvature_row(dir));
    }
  }
  if (!done) {
    // Clip the curvature onto the cone; the slope rows stay as solved.
    ValueFunction v;
    detail::unpack_quadratic(theta, r, v);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sign * v.A);
    const Eigen::MatrixXd clipped = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).asDiagonal() *
                                    eig.eigenvectors().transpose();
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < rn; ++i) {
      for (Eigen::Index j = i; j < rn; ++j) theta(k++) = sign * clipped(i, j);
    }
    out.warnings.push_back("fit: curvature cuts did not converge, eigenvalues clipped");
  }
  out.function = to_original(theta);
  out.objective = ys * ys * (Phi * theta - y).squaredNorm();
  return out;
}

// ---------------------------------------------------------------------------
// Trajectories

/// Sampled endogenous states: states[t - 1][k] is trajectory k at stage t.
struct TrajectorySet {
  State s0;
  std::vector<std::vector<State>> states;
  std::uint64_t seed = 0;

  [[nodiscard]] int stages() const { return static_cast<int>(states.size()); }
  [[nodiscard]] std::size_t count() const { return states.empty() ? 0 : states.front().size(); }
  [[nodiscard]] const std::vector<State>& at(int t) const {
    if (t < 1 || t > stages()) throw InputError("trajectory stage out of range");
    return states[static_cast<std::size_t>(t - 1)];
  }
};

/// Scalar states drawn uniformly from (1e-6 S0, (1 - delta + alpha)^(t-1) S0]
/// at stages t = 1..T; stage t uses its own sub-stream of the seed.
inline TrajectorySet sample_trajectories(double S0, double alpha, double delta, int T, int K,
                                         std::uint64_t seed) {
  if (!(S0 > 0.0) || !std::isfinite(S0)) throw InputError("trajectories: S0 must be positive");
  if (!(alpha >= 0.0 && alpha <= 1.0) || !(delta >= 0.0 && delta <= 1.0)) {
    throw InputError("trajectories: alpha and delta must lie in [0, 1]");
  }
  if (T < 1) throw InputError("trajectories: T must be at least 1");
  if (K < 2) throw InputError("trajectories: K must be at least 2");
  TrajectorySet out;
  out.s0 = State::Constant(1, S0);
  out.seed = seed;
  const double floor = 1e-6 * S0;
  for (int t = 1; t <= T; ++t) {
    const double upper = std::pow(1.0 - delta + alpha, t - 1) * S0;
    detail::UniformStream u(detail::derive_seed(seed, static_cast<std::uint64_t>(t)));
    std::vector<State> row(static_cast<std::size_t>(K));
    for (auto& s : row) s = State::Constant(1, upper - (upper - floor) * u());
    out.states.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage model and subproblem

/// Feasible decisions {x >= 0, weights . x <= bound} with weights >= 0.
struct BudgetSet {
  Eigen::VectorXd weights;
  double bound = 0.0;
};

namespace detail {

/// Euclidean projection onto a BudgetSet.
inline Decision project_budget(const Decision& y, const BudgetSet& set) {
  Decision x = y.cwiseMax(0.0);
  if (set.weights.dot(x) <= set.bound) return x;
  // x(tau) = max(y - tau w, 0); the budget use is decreasing in tau.
  std::vector<std::pair<double, Eigen::Index>> bp;
  for (Eigen::Index j = 0; j < y.size(); ++j) {
    if (set.weights(j) > 0.0 && y(j) > 0.0) bp.emplace_back(y(j) / set.weights(j), j);
  }
  std::sort(bp.begin(), bp.end());
  // Walk breakpoints from the largest; active set = coordinates with ratio > tau.
  double sum_wy = 0.0, sum_ww = 0.0;
  double tau = 0.0;
  for (std::size_t k = bp.size(); k-- > 0;) {
    const Eigen::Index j = bp[k].second;
    sum_wy += set.weights(j) * y(j);
    sum_ww += set.weights(j) * set.weights(j);
    tau = (sum_wy - set.bound) / sum_ww;
    const double next = k > 0 ? bp[k - 1].first : 0.0;
    if (tau >= next) break;
  }
  tau = std::max(tau, 0.0);
  for (Eigen::Index j = 0; j < y.size(); ++j) {
    if (set.weights(j) > 0.0) x(j) = std::max(y(j) - tau * set.weights(j), 0.0);
  }
  return x;
}

}  // namespace detail

/// Problem data of one decision stage. Derivatives are with respect to the
/// decision vector. Reward and transition receive the decision stage d and
/// the scenario value of the node (reward) or of a child (transition).
struct StageModel {
  std::size_t state_dim = 1;
  std::size_t decision_dim = 1;
  Sense sense = Sense::Maximize;
  std::function<double(const State&, const Decision&, double xi, int d)> reward;
  std::function<Decision(const State&, const Decision&, double xi, int d)> reward_gradient;
  std::function<State(const State&, const Decision&, double xi_next)> transition;
  std::function<Eigen::MatrixXd(const State&, const Decision&, double xi_next)> transition_jacobian;
  std::function<BudgetSet(const State&, int d, std::span<const double> child_xi,
                          std::span<const double> child_prob)>
      feasible;
  std::function<double(const State&)> terminal;
  std::function<Eigen::VectorXd(const State&)> terminal_gradient;
  /// Declares h_t and V_{t+1} homogeneous of degree one in the scenario values.
  bool homogeneous_degree_one = false;

  void validate() const {
    if (state_dim == 0 || decision_dim == 0) throw InputError("model: zero dimension");
    if (!reward || !reward_gradient || !transition || !transition_jacobian || !feasible ||
        !terminal || !terminal_gradient) {
      throw InputError("model: every callback must be set");
    }
  }
};

/// Value and gradient of a child's continuation at a next-stage state.
struct Continuation {
  std::function<double(const State&)> value;
  std::function<Eigen::VectorXd(const State&)> gradient;

  static Continuation from(ValueFunction v) {
    auto shared = std::make_shared<const ValueFunction>(std::move(v));
    return {[shared](const State& s) { return (*shared)(s); },
            [shared](const State& s) { return shared->gradient(s); }};
  }
  static Continuation terminal(const StageModel& m) { return {m.terminal, m.terminal_gradient}; }
};

struct ChildScenario {
  double xi = 0.0;
  double prob = 0.0;
  const Continuation* next = nullptr;
};

/// Expectation term over child continuation values and the weights that
/// produced it (the gradient of the term with respect to the values).
struct Aggregate {
  double value = 0.0;
  std::vector<double> weights;
};

using Aggregator =
    std::function<Aggregate(std::span<const double> values, std::span<const double> probs, Sense)>;

/// Plain expectation under the nominal probabilities.
inline Aggregate nominal_aggregate(std::span<const double> values, std::span<const double> probs,
                                   Sense) {
  Aggregate a;
  a.weights.assign(probs.begin(), probs.end());
  for (std::size_t j = 0; j < values.size(); ++j) a.value += probs[j] * values[j];
  return a;
}

struct SolverOptions {
  double tolerance = 1e-9;  // projected-gradient stationarity
  int max_iters = 20000;
};

struct SubproblemResult {
  Decision decision;
  double value = 0.0;
  std::vector<double> weights;  // aggregation weights at the solution
  double stationarity = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Optimizes reward + aggregated continuation over the model's budget set by
/// spectral projected gradient with Armijo backtracking. Coordinates with zero
/// budget weight start at 0 and move only along a nonzero gradient, so
/// decisions with neither cost nor effect stay at 0.
inline SubproblemResult stage_subproblem(const StageModel& model, const State& s, double xi,
                                         std::span<const ChildScenario> children, int d,
                                         const Aggregator& aggregate = nominal_aggregate,
                                         const SolverOptions& opt = {}) {
  if (children.empty()) throw InputError("subproblem: no children");
  std::vector<double> child_xi, child_prob;
  double total = 0.0;
  for (const auto& c : children) {
    if (c.next == nullptr) throw InputError("subproblem: child without continuation");
    if (!(c.prob >= 0.0)) throw InputError("subproblem: negative child probability");
    child_xi.push_back(c.xi);
    child_prob.push_back(c.prob);
    total += c.prob;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InputError("subproblem: child probabilities do not sum to 1");
  const BudgetSet set = model.feasible(s, d, child_xi, child_prob);
  const auto m = static_cast<Eigen::Index>(model.decision_dim);
  if (set.weights.size() != m) throw ContractError("subproblem: budget weights have the wrong size");
  if ((set.weights.array() < 0.0).any() || !set.weights.allFinite()) {
    throw ContractError("subproblem: budget weights must be finite and nonnegative");
  }
  if (!std::isfinite(set.bound) || set.bound < 0.0) {
    std::ostringstream os;
    os << "subproblem: budget bound " << set.bound << " leaves no feasible decision";
    throw InfeasibleError(os.str());
  }
  const double sigma = model.sense == Sense::Maximize ? 1.0 : -1.0;

  std::vector<double> vals(children.size());
  auto evaluate = [&](const Decision& x, Decision& grad, std::vector<double>& weights) {
    double h = model.reward(s, x, xi, d);
    grad = model.reward_gradient(s, x, xi, d);
    std::vector<State> next(children.size());
    for (std::size_t j = 0; j < children.size(); ++j) {
      next[j] = model.transition(s, x, children[j].xi);
      vals[j] = children[j].next->value(next[j]);
    }
    const Aggregate a = aggregate(vals, child_prob, model.sense);
    for (std::size_t j = 0; j < children.size(); ++j) {
      if (a.weights[j] == 0.0) continue;
      const Eigen::MatrixXd J = model.transition_jacobian(s, x, children[j].xi);
      grad += a.weights[j] * (J.transpose() * children[j].next->gradient(next[j]));
    }
    weights = a.weights;
    const double f = h + a.value;
    if (!std::isfinite(f) || !grad.allFinite()) {
      throw EvaluationError("subproblem: objective or gradient is not finite");
    }
    grad *= sigma;
    return f;
  };

  Decision x = Decision::Zero(m);
  Eigen::Index priced = 0;
  for (Eigen::Index j = 0; j < m; ++j) priced += set.weights(j) > 0.0 ? 1 : 0;
  for (Eigen::Index j = 0; j < m; ++j) {
    if (set.weights(j) > 0.0) x(j) = 0.5 * set.bound / (static_cast<double>(priced) * set.weights(j));
  }
  // Fixed scale for the stationarity test, so a runaway coordinate cannot
  // loosen it. Steps are capped at 1e4 scale so the projection of x + alpha g
  // keeps about 12 significant digits.
  const double scale = 1.0 + 2.0 * (m > 0 ? x.cwiseAbs().maxCoeff() : 0.0);
  const double runaway = 1e8 * scale;
  auto step_cap = [&](const Decision& grad) {
    return 1e4 * scale / std::max(grad.cwiseAbs().maxCoeff(), 1e-300);
  };

  SubproblemResult r;
  Decision g;
  std::vector<double> w;
  double f = evaluate(x, g, w);
  auto stationarity = [&](const Decision& at, const Decision& grad) {
    return (detail::project_budget(at + grad, set) - at).cwiseAbs().maxCoeff();
  };
  double alpha = 1.0;
  {
    const double s0 = stationarity(x, g);
    if (s0 > 0.0) alpha = 1.0 / std::max(1.0, g.cwiseAbs().maxCoeff());
  }
  for (r.iterations = 0; r.iterations < opt.max_iters; ++r.iterations) {
    r.stationarity = stationarity(x, g);
    if (r.stationarity <= opt.tolerance * scale) {
      r.converged = true;
      break;
    }
    const Decision dir = detail::project_budget(x + alpha * g, set) - x;
    const double slope = g.dot(dir);
    double lambda = 1.0;
    Decision xn, gn;
    std::vector<double> wn;
    double fn = 0.0;
    bool accepted = false;
    for (int bt = 0; bt < 60; ++bt) {
      xn = x + lambda * dir;
      fn = evaluate(xn, gn, wn);
      if (sigma * fn >= sigma * f + 1e-4 * lambda * slope) {
        accepted = true;
        break;
      }
      lambda *= 0.5;
    }
    if (!accepted) break;  // no ascent left at machine precision
    const Decision step = xn - x;
    const double sy = -step.dot(gn - g);
    const double cap = step_cap(gn);
    alpha = sy > 0.0 ? std::clamp(step.squaredNorm() / sy, 1e-16 * cap, cap) : cap;
    x = xn;
    g = gn;
    f = fn;
    w = wn;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (set.weights(j) == 0.0 && x(j) > runaway) {
        std::ostringstream os;
        os << "subproblem: decision " << j << " has no budget cost and grows without bound";
        throw UnboundedError(os.str());
      }
    }
  }
  if (!r.converged) {
    r.stationarity = stationarity(x, g);
    r.converged = r.stationarity <= opt.tolerance * scale;
  }
  r.decision = x;
  r.value = f;
  r.weights = w;
  return r;
}

// ---------------------------------------------------------------------------
// Backward recursion

struct PolicyPoint {
  State state;
  Decision decision;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

struct NodePolicy {
  int node = -1;  // -1 for the root
  int stage = 0;  // decision stage, equal to the tree stage of the node
  std::vector<PolicyPoint> points;
  std::optional<ValueFunction> value_function;  // absent for the root
  double fit_objective = 0.0;
};

struct PolicySolution {
  int stages = 0;
  std::vector<NodePolicy> nodes;  // root first, then non-leaf nodes by id
  std::vector<int> slot;          // node id -> position in nodes, -1 for leaves
  std::size_t subproblems = 0;
  std::vector<std::string> warnings;

  [[nodiscard]] const NodePolicy& root() const { return nodes.front(); }
  [[nodiscard]] double value() const { return root().points.front().value; }
  [[nodiscard]] const NodePolicy& at(int node) const {
    if (node < 0) return root();
    if (node >= static_cast<int>(slot.size()) || slot[static_cast<std::size_t>(node)] < 0) {
      throw InputError("policy: node " + std::to_string(node) + " has no decision");
    }
    return nodes[static_cast<std::size_t>(slot[static_cast<std::size_t>(node)])];
  }
};

struct DpOptions {
  ValueForm form = ValueForm::Quadratic;
  Orientation orientation = Orientation::ConcaveIncreasing;
  unsigned threads = 1;
  SolverOptions solver;
  Aggregator aggregate = nominal_aggregate;
};

namespace detail {

template <class E>
[[noreturn]] void rethrow_at(const E& e, int d, int node, std::size_t k) {
  std::ostringstream os;
  os << e.what() << " (stage " << d << ", node " << node << ", trajectory " << k << ")";
  throw E(os.str());
}

/// Runs the subproblem and rethrows library errors with node diagnostics.
inline SubproblemResult solve_with_context(const StageModel& model, const State& s, double xi,
                                           std::span<const ChildScenario> children, int d,
                                           int node, std::size_t k, const DpOptions& opt) {
  try {
    return stage_subproblem(model, s, xi, children, d, opt.aggregate, opt.solver);
  } catch (const InfeasibleError& e) {
    rethrow_at(e, d, node, k);
  } catch (const UnboundedError& e) {
    rethrow_at(e, d, node, k);
  } catch (const EvaluationError& e) {
    rethrow_at(e, d, node, k);
  } catch (const DualSolveError& e) {
    rethrow_at(e, d, node, k);
  } catch (const ContractError& e) {
    rethrow_at(e, d, node, k);
  }
}

inline void check_inputs(const StageModel& model, const ScenarioTree& tree,
                         const TrajectorySet& traj) {
  model.validate();
  if (tree.stages < 1) throw InputError("backward solve: tree has no stages");
  if (traj.stages() != tree.stages) {
    std::ostringstream os;
    os << "backward solve: trajectories have " << traj.stages() << " stages, tree has "
       << tree.stages;
    throw InputError(os.str());
  }
  if (static_cast<std::size_t>(traj.s0.size()) != model.state_dim) {
    throw InputError("backward solve: initial state has the wrong dimension");
  }
  for (const auto& row : traj.states) {
    for (const auto& s : row) {
      if (static_cast<std::size_t>(s.size()) != model.state_dim) {
        throw InputError("backward solve: trajectory state has the wrong dimension");
      }
    }
  }
  for (const auto& n : tree.nodes) {
    if (n.stage < tree.stages && n.children.empty()) {
      throw InputError("backward solve: node " + std::to_string(n.id) + " ends before the last stage");
    }
  }
}

inline void note_unconverged(PolicySolution& sol) {
  std::size_t count = 0;
  for (const auto& n : sol.nodes) {
    for (const auto& p : n.points) count += p.converged ? 0 : 1;
  }
  if (count > 0) {
    sol.warnings.push_back(std::to_string(count) +
                           " subproblems stopped before reaching the stationarity tolerance");
  }
}

inline PolicySolution empty_solution(const ScenarioTree& tree) {
  PolicySolution sol;
  sol.stages = tree.stages;
  sol.slot.assign(tree.nodes.size(), -1);
  sol.nodes.push_back(NodePolicy{});
  for (const auto& n : tree.nodes) {
    if (n.children.empty()) continue;
    sol.slot[static_cast<std::size_t>(n.id)] = static_cast<int>(sol.nodes.size());
    NodePolicy p;
    p.node = n.id;
    p.stage = n.stage;
    sol.nodes.push_back(std::move(p));
  }
  return sol;
}

}  // namespace detail

/// Continuation of every node: the fitted value function for decision nodes,
/// the terminal function for leaves.
inline std::vector<Continuation> continuations(const StageModel& model, const ScenarioTree& tree,
                                               const PolicySolution& sol) {
  std::vector<Continuation> out(tree.nodes.size());
  for (const auto& n : tree.nodes) {
    const auto id = static_cast<std::size_t>(n.id);
    if (n.children.empty()) {
      out[id] = Continuation::terminal(model);
    } else if (sol.slot[id] >= 0 && sol.at(n.id).value_function) {
      out[id] = Continuation::from(*sol.at(n.id).value_function);
    }
  }
  return out;
}

inline std::vector<ChildScenario> child_scenarios(const ScenarioTree& tree, int node,
                                                  const std::vector<Continuation>& cont) {
  std::vector<ChildScenario> out;
  for (int c : tree.children_of(node)) {
    const auto& n = tree.node(c);
    out.push_back({n.value, n.prob, &cont[static_cast<std::size_t>(c)]});
  }
  return out;
}

/// Backward recursion over the tree (one subproblem per decision node and
/// trajectory point, plus the root at the initial state).
inline PolicySolution backward_solve(const StageModel& model, const ScenarioTree& tree,
                                     const TrajectorySet& traj, const DpOptions& opt = {}) {
  detail::check_inputs(model, tree, traj);
  PolicySolution sol = detail::empty_solution(tree);
  std::vector<Continuation> cont(tree.nodes.size());
  for (int leaf : tree.leaves()) cont[static_cast<std::size_t>(leaf)] = Continuation::terminal(model);

  for (int d = tree.stages - 1; d >= 1; --d) {
    const auto ids = tree.stage_nodes(d);
    const auto& states = traj.at(d + 1);
    const std::size_t K = states.size();
    std::vector<std::vector<ChildScenario>> kids(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) kids[i] = child_scenarios(tree, ids[i], cont);
    std::vector<PolicyPoint> results(ids.size() * K);
    detail::parallel_for(results.size(), opt.threads, [&](std::size_t task) {
      const std::size_t i = task / K, k = task % K;
      const auto& node = tree.node(ids[i]);
      const auto r = detail::solve_with_context(model, states[k], node.value, kids[i], d, node.id, k, opt);
      results[task] = {states[k], r.decision, r.value, r.iterations, r.converged};
    });
    sol.subproblems += results.size();
    std::vector<FitResult> fits(ids.size());
    detail::parallel_for(ids.size(), opt.threads, [&](std::size_t i) {
      std::vector<double> values(K);
      for (std::size_t k = 0; k < K; ++k) values[k] = results[i * K + k].value;
      fits[i] = fit_value_function(states, values, opt.form, opt.orientation);
    });
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto& np = sol.nodes[static_cast<std::size_t>(sol.slot[static_cast<std::size_t>(ids[i])])];
      np.points.assign(results.begin() + static_cast<std::ptrdiff_t>(i * K),
                       results.begin() + static_cast<std::ptrdiff_t>((i + 1) * K));
      np.value_function = fits[i].function;
      np.fit_objective = fits[i].objective;
      for (const auto& w : fits[i].warnings) sol.warnings.push_back("node " + std::to_string(ids[i]) + ": " + w);
      cont[static_cast<std::size_t>(ids[i])] = Continuation::from(fits[i].function);
    }
  }
  const auto kids = child_scenarios(tree, -1, cont);
  const auto r = detail::solve_with_context(model, traj.s0, 0.0, kids, 0, -1, 0, opt);
  sol.nodes.front().points = {{traj.s0, r.decision, r.value, r.iterations, r.converged}};
  sol.subproblems += 1;
  detail::note_unconverged(sol);
  return sol;
}

/// Homogeneous shortcut: at every stage d >= 1 only the n subproblems built on
/// the stage-1 quantizer are solved per trajectory point; a node's values and
/// value function are those of its quantizer index scaled by the node's
/// median ratio to the root. Requires a model declared homogeneous of degree
/// one in the scenario values and a tree with the same branchiness n at every
/// node.
inline PolicySolution backward_solve_homogeneous(const StageModel& model, const ScenarioTree& tree,
                                                 const TrajectorySet& traj,
                                                 const DpOptions& opt = {}) {
  if (!model.homogeneous_degree_one) {
    throw ContractError("homogeneous solve: model is not declared homogeneous of degree one");
  }
  detail::check_inputs(model, tree, traj);
  const auto& base = tree.roots;
  const std::size_t n = base.size();
  for (const auto& node : tree.nodes) {
    if (!node.children.empty() && node.children.size() != n) {
      throw ContractError("homogeneous solve: branchiness differs from the stage-1 quantizer");
    }
  }
  if (!(tree.root_median > 0.0)) throw ContractError("homogeneous solve: root median must be positive");
  std::vector<double> base_xi(n), base_p(n);
  for (std::size_t j = 0; j < n; ++j) {
    base_xi[j] = tree.node(base[j]).value;
    base_p[j] = tree.node(base[j]).prob;
  }

  PolicySolution sol = detail::empty_solution(tree);
  std::vector<Continuation> next(n, Continuation::terminal(model));  // per quantizer index
  std::vector<std::vector<PolicyPoint>> base_points(n);
  std::vector<FitResult> base_fits(n);
  for (int d = tree.stages - 1; d >= 1; --d) {
    const auto& states = traj.at(d + 1);
    const std::size_t K = states.size();
    std::vector<ChildScenario> kids(n);
    for (std::size_t j = 0; j < n; ++j) kids[j] = {base_xi[j], base_p[j], &next[j]};
    std::vector<PolicyPoint> results(n * K);
    detail::parallel_for(results.size(), opt.threads, [&](std::size_t task) {
      const std::size_t j = task / K, k = task % K;
      const auto r = detail::solve_with_context(model, states[k], base_xi[j], kids, d,
                                                base[j], k, opt);
      results[task] = {states[k], r.decision, r.value, r.iterations, r.converged};
    });
    sol.subproblems += results.size();
    detail::parallel_for(n, opt.threads, [&](std::size_t j) {
      std::vector<double> values(K);
      for (std::size_t k = 0; k < K; ++k) values[k] = results[j * K + k].value;
      base_fits[j] = fit_value_function(states, values, opt.form, opt.orientation);
    });
    for (std::size_t j = 0; j < n; ++j) {
      base_points[j].assign(results.begin() + static_cast<std::ptrdiff_t>(j * K),
                            results.begin() + static_cast<std::ptrdiff_t>((j + 1) * K));
      next[j] = Continuation::from(base_fits[j].function);
    }
    for (int id : tree.stage_nodes(d)) {
      const auto& node = tree.node(id);
      const auto j = static_cast<std::size_t>(node.index);
      if (j >= n) throw ContractError("homogeneous solve: quantizer index out of range");
      const double ratio = node.median / tree.root_median;
      auto& np = sol.nodes[static_cast<std::size_t>(sol.slot[static_cast<std::size_t>(id)])];
      np.points = base_points[j];
      for (auto& p : np.points) p.value *= ratio;
      np.value_function = base_fits[j].function.scaled(ratio);
      np.fit_objective = ratio * ratio * base_fits[j].objective;
    }
  }
  std::vector<Continuation> cont(tree.nodes.size());
  for (int id : tree.roots) {
    const auto& node = tree.node(id);
    if (node.children.empty()) {
      cont[static_cast<std::size_t>(id)] = Continuation::terminal(model);
    } else {
      cont[static_cast<std::size_t>(id)] = Continuation::from(*sol.at(id).value_function);
    }
  }
  const auto kids = child_scenarios(tree, -1, cont);
  const auto r = detail::solve_with_context(model, traj.s0, 0.0, kids, 0, -1, 0, opt);
  sol.nodes.front().points = {{traj.s0, r.decision, r.value, r.iterations, r.converged}};
  sol.subproblems += 1;
  detail::note_unconverged(sol);
  return sol;
}

/// Re-solves the subproblem of a decision node at an arbitrary state, using
/// the stored continuations of its children.
inline SubproblemResult solve_at(const StageModel& model, const ScenarioTree& tree,
                                 const PolicySolution& sol, int node, const State& s,
                                 const DpOptions& opt = {}) {
  const auto cont = continuations(model, tree, sol);
  const auto kids = child_scenarios(tree, node, cont);
  const double xi = node < 0 ? 0.0 : tree.node(node).value;
  const int d = node < 0 ? 0 : tree.node(node).stage;
  return detail::solve_with_context(model, s, xi, kids, d, node, 0, opt);
}

}  // namespace ftree
