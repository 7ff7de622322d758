#pragma once

// Independent oracles for the flood model: pinned toy instances and an
// exhaustive decision-lattice search that never uses fitted value functions.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "ftree/flood.hpp"

namespace ftree::testing {

/// Tree with explicit per-stage values and probabilities: stage t holds
/// prod(branchiness[0..t]) nodes; node values are given in breadth-first order.
inline ScenarioTree explicit_tree(const std::vector<int>& branchiness,
                                  const std::vector<double>& values,
                                  const std::vector<double>& probs) {
  ScenarioTree t;
  t.stages = static_cast<int>(branchiness.size());
  t.root_median = 1.0;
  std::vector<int> frontier{-1};
  std::size_t next = 0;
  for (int stage = 1; stage <= t.stages; ++stage) {
    std::vector<int> level;
    for (int parent : frontier) {
      for (int k = 0; k < branchiness[static_cast<std::size_t>(stage - 1)]; ++k) {
        TreeNode n;
        n.id = static_cast<int>(t.nodes.size());
        n.stage = stage;
        n.parent = parent;
        n.index = k;
        n.value = values.at(next);
        n.prob = probs.at(next);
        n.median = 1.0;
        ++next;
        level.push_back(n.id);
        t.nodes.push_back(n);
      }
    }
    frontier = std::move(level);
  }
  t.link();
  return t;
}

/// Constants of the pinned toy instance; stage count and exposure set by callers.
inline FloodModelConfig toy_config(int stages) {
  FloodModelConfig c;
  c.alpha = 0.5;
  c.beta = 0.5;
  c.delta = 0.0;
  c.rho = 1.0;
  c.gamma = 0.5;
  c.load = 0.2;
  c.s0 = 1.0;
  c.stages = stages;
  c.exposure = 1.0;
  c.trajectories = 64;
  c.seed = 7;
  c.branchiness.assign(static_cast<std::size_t>(stages), 1);
  return c;
}

/// T = 1 single node with relative loss 0.1.
inline ScenarioTree toy_tree_t1() { return explicit_tree({1}, {0.1}, {1.0}); }

/// T = 1 with two child scenarios.
inline ScenarioTree toy_tree_t1_two() { return explicit_tree({2}, {0.05, 0.2}, {0.6, 0.4}); }

/// T = 2 with branchiness [2, 1].
inline ScenarioTree toy_tree_t2() {
  return explicit_tree({2, 1}, {0.05, 0.2, 0.1, 0.15}, {0.6, 0.4, 1.0, 1.0});
}

/// Best value of the subtree below `node` at capital S over a lattice of
/// budget shares (x share a, insurance share b, consumption 1 - a - b) with
/// `points` values per axis.
inline double lattice_value(const FloodModelConfig& cfg, const ScenarioTree& tree, int node,
                            double S, int points) {
  const auto kids = tree.children_of(node);
  if (kids.empty()) return cfg.beta * std::pow(cfg.rho, -cfg.stages) * utility(S, cfg.gamma);
  const int d = node < 0 ? 0 : tree.node(node).stage;
  double mean = 0.0;
  for (int c : kids) mean += tree.node(c).prob * tree.node(c).value;
  const double pi = premium(mean, cfg.load);
  const double B = cfg.alpha * S;
  double best = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < points; ++i) {
    const double a = static_cast<double>(i) / (points - 1);
    for (int j = 0; i + j < points; ++j) {
      if (pi == 0.0 && j > 0) break;
      const double b = static_cast<double>(j) / (points - 1);
      const double x = a * B;
      const double z = pi > 0.0 ? b * B / pi : 0.0;
      const double c = std::max(0.0, (1.0 - a - b) * B);
      double v = (1.0 - cfg.beta) * std::pow(cfg.rho, -d) * utility(c, cfg.gamma);
      for (int k : kids) {
        const auto& n = tree.node(k);
        v += n.prob * lattice_value(cfg, tree, k, transition(S, x, z, n.value, cfg.delta), points);
      }
      best = std::max(best, v);
    }
  }
  return best;
}

}  // namespace ftree::testing
