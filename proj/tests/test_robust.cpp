#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "ftree/flood.hpp"
#include "ftree/robust.hpp"
#include "support/flood_oracles.hpp"
#include "support/grid_oracles.hpp"

using namespace ftree;
using namespace ftree::testing;

namespace {

std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<double> p(n);
  double s = 0.0;
  for (auto& x : p) s += (x = u(rng));
  for (auto& x : p) x /= s;
  return p;
}

void expect_invariants(const std::vector<double>& v, const AmbiguitySet& set, const DualSolution& sol) {
  const auto& p = set.nominal;
  double qsum = 0.0, primal = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    qsum += sol.q[i];
    primal += sol.q[i] * v[i];
  }
  EXPECT_NEAR(qsum, 1.0, 1e-8);
  EXPECT_LE(divergence(p, sol.q), set.theta + 1e-8);
  EXPECT_NEAR(primal, sol.value, 1e-10);
  if (sol.nominal) return;
  const double kappa = sol.mu1 + sol.mu2;
  double dual = -sol.mu1 * set.theta - sol.mu2;
  for (std::size_t i = 0; i < v.size(); ++i) {
    ASSERT_GT(v[i] + kappa, 0.0);
    EXPECT_NEAR(sol.q[i], p[i] * std::sqrt(sol.mu1 / (v[i] + kappa)), 1e-10);
    EXPECT_NEAR(sol.y[i], std::sqrt(sol.mu1 * (v[i] + kappa)), 1e-10 * std::max(1.0, sol.y[i]));
    dual += 2.0 * p[i] * std::sqrt(sol.mu1 * (v[i] + kappa)) - 2.0 * sol.mu1 * p[i];
  }
  EXPECT_NEAR(dual, sol.value, 1e-8);
}

}  // namespace

TEST(WorstCase, NominalAtThetaZero) {
  const std::vector<double> v{0.0, 1.0};
  const auto sol = worst_case_weights(v, {{0.5, 0.5}, 0.0});
  EXPECT_TRUE(sol.nominal);
  EXPECT_DOUBLE_EQ(sol.q[0], 0.5);
  EXPECT_DOUBLE_EQ(sol.q[1], 0.5);
  EXPECT_DOUBLE_EQ(sol.value, 0.5);
}

TEST(WorstCase, TwoPointClosedForm) {
  const std::vector<double> v{0.0, 1.0};
  const AmbiguitySet set{{0.5, 0.5}, 0.1};
  const auto sol = worst_case_weights(v, set);
  const double q1 = 0.5 + std::sqrt(0.025 / 1.1);
  EXPECT_NEAR(sol.q[0], q1, 1e-9);
  EXPECT_NEAR(sol.value, 1.0 - q1, 1e-9);
  EXPECT_NEAR(sol.value, 0.34924, 1e-5);
  EXPECT_NEAR(sol.divergence, 0.1, 1e-9);
  expect_invariants(v, set, sol);
}

TEST(WorstCase, LargeThetaApproachesMinimum) {
  const std::vector<double> v{0.0, 1.0};
  const auto sol = worst_case_weights(v, {{0.5, 0.5}, 1e6});
  EXPECT_NEAR(sol.value, 0.0, 1e-3);
  EXPECT_GT(sol.q[1], 0.0);
}

TEST(WorstCase, ConstantValues) {
  const std::vector<double> v{3.0, 3.0, 3.0};
  for (double theta : {0.0, 0.1, 10.0}) {
    const AmbiguitySet set{{0.2, 0.3, 0.5}, theta};
    EXPECT_DOUBLE_EQ(worst_case_expectation(v, set), 3.0);
    EXPECT_TRUE(worst_case_weights(v, set).nominal);
  }
}

TEST(WorstCase, ThreePointGridOracle) {
  const std::vector<double> v{1.0, 2.0, 4.0};
  const std::vector<double> p{0.2, 0.3, 0.5};
  const AmbiguitySet set{p, 0.05};
  const double grid = worst_case_grid3(v, p, 0.05, 1e-3);
  const auto sol = worst_case_weights(v, set);
  EXPECT_NEAR(sol.value, grid, 1e-3);
  EXPECT_LE(sol.value, grid + 1e-12);
  expect_invariants(v, set, sol);
}

TEST(WorstCase, StrongDualityOnRandomInstances) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> val(-5.0, 5.0), th(0.0, 2.0);
  std::uniform_int_distribution<int> size(2, 12);
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = static_cast<std::size_t>(size(rng));
    std::vector<double> v(n);
    for (auto& x : v) x = val(rng);
    const AmbiguitySet set{random_simplex(rng, n), th(rng)};
    const auto sol = worst_case_weights(v, set);
    EXPECT_LT(std::abs(sol.value - sol.dual_value), 1e-8) << "trial " << trial;
    expect_invariants(v, set, sol);
  }
}

TEST(WorstCase, MonotoneAndBounded) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> val(0.0, 10.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(5);
    for (auto& x : v) x = val(rng);
    const auto p = random_simplex(rng, 5);
    double nominal = 0.0;
    for (std::size_t i = 0; i < 5; ++i) nominal += p[i] * v[i];
    const double vmin = *std::min_element(v.begin(), v.end());
    double prev = nominal;
    for (double theta : {0.0, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 100.0}) {
      const double w = worst_case_expectation(v, {p, theta});
      EXPECT_LE(w, prev + 1e-12);
      EXPECT_GE(w, vmin - 1e-12);
      EXPECT_LE(w, nominal + 1e-12);
      prev = w;
    }
  }
}

TEST(WorstCase, ShiftInvariance) {
  const std::vector<double> p{0.1, 0.4, 0.2, 0.3};
  const std::vector<double> v{2.0, -1.0, 0.5, 3.0};
  const auto base = worst_case_weights(v, {p, 0.3});
  for (double kappa : {-10.0, 1.0, 1e3}) {
    std::vector<double> w = v;
    for (auto& x : w) x += kappa;
    const auto shifted = worst_case_weights(w, {p, 0.3});
    EXPECT_NEAR(shifted.value, base.value + kappa, 1e-9 * std::max(1.0, std::abs(kappa)));
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(shifted.q[i], base.q[i], 1e-9);
  }
}

TEST(WorstCase, WeightsStayInsideSimplex) {
  const std::vector<double> p{0.25, 0.25, 0.25, 0.25};
  const std::vector<double> v{0.0, 1.0, 2.0, 50.0};
  for (double theta : {0.1, 10.0, 1e4}) {
    const auto sol = worst_case_weights(v, {p, theta});
    for (double q : sol.q) EXPECT_GT(q, 0.0);
  }
}

TEST(WorstCase, RejectsBadInput) {
  const std::vector<double> v{0.0, 1.0};
  EXPECT_THROW(worst_case_weights(v, {{0.5, 0.5}, -0.1}), InputError);
  EXPECT_THROW(worst_case_weights(v, {{0.5, 0.6}, 0.1}), InputError);
  EXPECT_THROW(worst_case_weights(v, {{1.0}, 0.1}), InputError);
  const std::vector<double> three{0.0, 1.0, 2.0};
  EXPECT_THROW(worst_case_weights(three, {{0.5, 0.5}, 0.1}), InputError);
}

TEST(RobustAggregate, MinimizeRaisesExpectation) {
  const std::vector<double> v{0.0, 1.0};
  const std::vector<double> p{0.5, 0.5};
  const auto agg = robust_aggregate(0.1);
  const auto lo = agg(v, p, Sense::Maximize);
  const auto hi = agg(v, p, Sense::Minimize);
  EXPECT_NEAR(lo.value, 1.0 - (0.5 + std::sqrt(0.025 / 1.1)), 1e-9);
  EXPECT_NEAR(hi.value, 0.5 + std::sqrt(0.025 / 1.1), 1e-9);
}

TEST(RobustBackwardSolve, ThetaZeroEqualsNominal) {
  const auto cfg = toy_config(2);
  const auto inst = build_model(cfg, toy_tree_t2());
  const auto traj = flood_trajectories(cfg);
  const auto nominal = backward_solve(inst.model, inst.tree, traj, flood_options());
  const auto robust = robust_backward_solve(inst.model, inst.tree, traj, 0.0, flood_options());
  EXPECT_EQ(nominal.value(), robust.value());
  EXPECT_EQ(nominal.root().points.front().decision, robust.root().points.front().decision);
}

TEST(RobustBackwardSolve, ToyRobustBelowNominal) {
  const auto cfg = toy_config(1);
  const auto inst = build_model(cfg, toy_tree_t1_two());
  const auto traj = flood_trajectories(cfg);
  const double nominal = backward_solve(inst.model, inst.tree, traj, flood_options()).value();
  const double robust = robust_backward_solve(inst.model, inst.tree, traj, 0.1, flood_options()).value();
  EXPECT_LT(robust, nominal);
}

TEST(ThetaSweep, ValuesNonincreasing) {
  const auto cfg = toy_config(1);
  const auto inst = build_model(cfg, toy_tree_t1_two());
  const auto traj = flood_trajectories(cfg);
  const std::vector<double> thetas{0.0, 0.05, 0.1, 0.2, 0.5};
  const auto rows = theta_sweep(inst.model, inst.tree, traj, thetas, flood_options());
  ASSERT_EQ(rows.size(), thetas.size());
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LE(rows[i].value, rows[i - 1].value + 1e-9);
}

TEST(ThetaSweep, SingletonAndRepeats) {
  const auto cfg = toy_config(2);
  const auto inst = build_model(cfg, toy_tree_t2());
  const auto traj = flood_trajectories(cfg);
  const std::vector<double> zero{0.0};
  const auto one = theta_sweep(inst.model, inst.tree, traj, zero, flood_options());
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].value, backward_solve(inst.model, inst.tree, traj, flood_options()).value());

  const std::vector<double> repeated{0.1, 0.1};
  const auto rows = theta_sweep(inst.model, inst.tree, traj, repeated, flood_options());
  EXPECT_EQ(rows[0].value, rows[1].value);
  EXPECT_EQ(rows[0].decision, rows[1].decision);
  EXPECT_THROW(theta_sweep(inst.model, inst.tree, traj, std::span<const double>{}, flood_options()),
               InputError);
}
