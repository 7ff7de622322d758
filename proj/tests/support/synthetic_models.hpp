#pragma once

// Synthetic stage models with known shape properties.

#include <random>

#include "ftree/dp.hpp"

namespace ftree::testing {

/// Minimization model with convex-increasing reward, transition and terminal
/// in the state, and a fixed budget.
inline StageModel convex_model(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  const double a1 = u(rng), a2 = u(rng), c1 = u(rng), c2 = u(rng), k1 = u(rng), k2 = u(rng);
  const double e1 = u(rng), e2 = u(rng), budget = 1.0 + u(rng);
  StageModel m;
  m.state_dim = 1;
  m.decision_dim = 2;
  m.sense = Sense::Minimize;
  m.reward = [=](const State& s, const Decision& x, double, int) {
    return a1 * s(0) * s(0) + a2 * s(0) + (x(0) - c1) * (x(0) - c1) + (x(1) - c2) * (x(1) - c2);
  };
  m.reward_gradient = [=](const State&, const Decision& x, double, int) {
    return Decision(Eigen::Vector2d(2.0 * (x(0) - c1), 2.0 * (x(1) - c2)));
  };
  m.transition = [=](const State& s, const Decision& x, double xi) {
    return State::Constant(1, (1.0 + 0.1 * xi) * s(0) + k1 * x(0) + k2 * x(1));
  };
  m.transition_jacobian = [=](const State&, const Decision&, double) {
    Eigen::MatrixXd J(1, 2);
    J << k1, k2;
    return J;
  };
  m.feasible = [=](const State&, int, std::span<const double>, std::span<const double>) {
    return BudgetSet{Eigen::Vector2d(1.0, 1.0), budget};
  };
  m.terminal = [=](const State& s) { return e1 * s(0) * s(0) + e2 * s(0); };
  m.terminal_gradient = [=](const State& s) {
    return Eigen::VectorXd::Constant(1, 2.0 * e1 * s(0) + e2);
  };
  return m;
}

}  // namespace ftree::testing
