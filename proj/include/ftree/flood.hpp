#pragma once

// Governmental flood budget model: capital S_t, decisions (x, c, z) for
// investment, consumption and insurance cover, CRRA utility of consumption
// and of terminal capital, and reports built from forward passes.

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "ftree/dp.hpp"
#include "ftree/errors.hpp"
#include "ftree/robust.hpp"
#include "ftree/tree.hpp"

namespace ftree {

/// CRRA utility c^(1-gamma)/(1-gamma); gamma = 1 is the logarithm, which
/// returns -infinity at c = 0.
inline double utility(double c, double gamma) {
  if (!(c >= 0.0)) throw DomainError("utility: consumption must be nonnegative");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw DomainError("utility: gamma must lie in [0, 1]");
  if (gamma == 1.0) return c == 0.0 ? -std::numeric_limits<double>::infinity() : std::log(c);
  return std::pow(c, 1.0 - gamma) / (1.0 - gamma);
}

/// u'(c) = c^(-gamma), evaluated at max(c, 1e-300) so it stays finite.
inline double utility_derivative(double c, double gamma) {
  return std::pow(std::max(c, 1e-300), -gamma);
}

inline double premium(double mean_loss, double load) {
  if (!(mean_loss >= 0.0)) throw DomainError("premium: mean loss must be nonnegative");
  if (!(load >= 0.0)) throw DomainError("premium: load must be nonnegative");
  return (1.0 + load) * mean_loss;
}

/// S' = [(1 - delta) S + x](1 - xi) + z xi.
inline double transition(double S, double x, double z, double xi, double delta) {
  return ((1.0 - delta) * S + x) * (1.0 - xi) + z * xi;
}

struct FloodModelConfig {
  double alpha = 0.2;
  double beta = 0.5;
  double delta = 0.05;
  double rho = 1.0;
  double gamma = 0.5;
  double load = 0.05;  // insurance load V
  double s0 = 322.56;
  int stages = 3;
  double pnl = 0.6779;
  double exposure = 0.0;  // 0 selects the default, quantile(0.9999) of the base law
  int trajectories = 64;
  std::uint64_t seed = 1;
  std::vector<int> branchiness{3, 3, 3};

  void validate() const {
    auto unit = [](double v, const char* name) {
      if (!(v >= 0.0 && v <= 1.0)) throw InputError(std::string("flood config: ") + name + " must lie in [0, 1]");
    };
    unit(alpha, "alpha");
    unit(beta, "beta");
    unit(delta, "delta");
    unit(gamma, "gamma");
    unit(pnl, "pnl");
    if (!(rho > 0.0 && rho <= 1.0)) throw InputError("flood config: rho must lie in (0, 1]");
    if (!(load >= 0.0) || !std::isfinite(load)) throw InputError("flood config: load must be nonnegative");
    if (!(s0 > 0.0) || !std::isfinite(s0)) throw InputError("flood config: s0 must be positive");
    if (stages < 1) throw InputError("flood config: stages must be at least 1");
    if (!(exposure >= 0.0) || !std::isfinite(exposure)) throw InputError("flood config: exposure must be positive");
    if (trajectories < 2) throw InputError("flood config: trajectories must be at least 2");
    if (static_cast<int>(branchiness.size()) != stages) {
      throw InputError("flood config: branchiness needs one entry per stage");
    }
    for (int b : branchiness) {
      if (b < 1) throw InputError("flood config: branchiness entries must be positive");
    }
  }
};

struct FloodInstance {
  StageModel model;
  ScenarioTree tree;  // node values converted to relative losses
  int clamped = 0;
  std::vector<std::string> warnings;
};

/// Builds the stage model and the relative-loss tree (values divided by the
/// exposure and clamped to [0, 1 - 1e-9]). More than 5% clamped nodes means
/// the exposure does not fit the tree and is rejected.
inline FloodInstance build_model(const FloodModelConfig& cfg, const ScenarioTree& absolute) {
  cfg.validate();
  if (!(cfg.exposure > 0.0)) throw InputError("flood model: exposure must be positive");
  if (absolute.stages != cfg.stages) {
    std::ostringstream os;
    os << "flood model: tree has " << absolute.stages << " stages, config has " << cfg.stages;
    throw InputError(os.str());
  }
  FloodInstance inst;
  inst.tree = absolute;
  const double cap = 1.0 - 1e-9;
  for (auto& n : inst.tree.nodes) {
    const double xi = n.value / cfg.exposure;
    const double clamped = std::clamp(xi, 0.0, cap);
    if (clamped != xi) ++inst.clamped;
    n.value = clamped;
  }
  if (!inst.tree.nodes.empty() &&
      static_cast<double>(inst.clamped) > 0.05 * static_cast<double>(inst.tree.nodes.size())) {
    std::ostringstream os;
    os << "flood model: " << inst.clamped << " of " << inst.tree.nodes.size()
       << " node losses fall outside [0, exposure]; exposure " << cfg.exposure
       << " is misconfigured";
    throw InputError(os.str());
  }
  if (inst.clamped > 0) {
    inst.warnings.push_back(std::to_string(inst.clamped) + " node losses clamped to [0, 1)");
  }
  if (cfg.gamma == 1.0) inst.warnings.push_back("gamma = 1: logarithmic utility, u(0) = -infinity");

  const double a = cfg.alpha, b = cfg.beta, dl = cfg.delta, rho = cfg.rho, g = cfg.gamma, V = cfg.load;
  const int T = cfg.stages;
  StageModel& m = inst.model;
  m.state_dim = 1;
  m.decision_dim = 3;
  m.sense = Sense::Maximize;
  m.reward = [b, rho, g](const State&, const Decision& x, double, int d) {
    return (1.0 - b) * std::pow(rho, -d) * utility(std::max(x(1), 0.0), g);
  };
  m.reward_gradient = [b, rho, g](const State&, const Decision& x, double, int d) {
    Decision grad = Decision::Zero(3);
    grad(1) = (1.0 - b) * std::pow(rho, -d) * utility_derivative(x(1), g);
    return grad;
  };
  m.transition = [dl](const State& s, const Decision& x, double xi) {
    return State::Constant(1, transition(s(0), x(0), x(2), xi, dl));
  };
  m.transition_jacobian = [](const State&, const Decision&, double xi) {
    Eigen::MatrixXd J(1, 3);
    J << 1.0 - xi, 0.0, xi;
    return J;
  };
  m.feasible = [a, V](const State& s, int, std::span<const double> xi, std::span<const double> p) {
    double mean = 0.0;
    for (std::size_t j = 0; j < xi.size(); ++j) mean += p[j] * xi[j];
    BudgetSet set;
    set.weights = Eigen::Vector3d(1.0, 1.0, premium(mean, V));
    set.bound = a * s(0);
    return set;
  };
  m.terminal = [b, rho, g, T](const State& s) {
    return b * std::pow(rho, -T) * utility(std::max(s(0), 0.0), g);
  };
  m.terminal_gradient = [b, rho, g, T](const State& s) {
    return Eigen::VectorXd::Constant(1, b * std::pow(rho, -T) * utility_derivative(s(0), g));
  };
  return inst;
}

inline TrajectorySet flood_trajectories(const FloodModelConfig& cfg) {
  return sample_trajectories(cfg.s0, cfg.alpha, cfg.delta, cfg.stages, cfg.trajectories, cfg.seed);
}

inline DpOptions flood_options(unsigned threads = 1) {
  DpOptions opt;
  opt.form = ValueForm::Quadratic;
  opt.orientation = Orientation::ConcaveIncreasing;
  opt.threads = threads;
  return opt;
}

/// Realized states and decisions along every path of the tree.
struct ForwardPass {
  std::vector<double> state;               // per node id: capital on arrival
  std::vector<Decision> decision;          // per node id, empty for leaves
  Decision root_decision;
  std::vector<std::pair<int, double>> leaf_capital;  // (leaf id, S_T)
};

/// Applies the policy from S0: each decision node re-solves its subproblem at
/// the realized capital with the stored child continuations.
inline ForwardPass forward_pass(const FloodInstance& inst, const PolicySolution& policy,
                                double s0, double delta, const DpOptions& opt = {}) {
  const auto& tree = inst.tree;
  ForwardPass out;
  out.state.assign(tree.nodes.size(), 0.0);
  out.decision.assign(tree.nodes.size(), Decision());
  const auto cont = continuations(inst.model, tree, policy);
  auto solve = [&](int node, double S) {
    const auto kids = child_scenarios(tree, node, cont);
    const double xi = node < 0 ? 0.0 : tree.node(node).value;
    const int d = node < 0 ? 0 : tree.node(node).stage;
    return detail::solve_with_context(inst.model, State::Constant(1, S), xi, kids, d, node, 0, opt)
        .decision;
  };
  out.root_decision = policy.root().points.front().decision;
  auto arrive = [&](int id, double S_parent, const Decision& x) {
    const double xi = tree.node(id).value;
    out.state[static_cast<std::size_t>(id)] = transition(S_parent, x(0), x(2), xi, delta);
  };
  for (int id : tree.roots) arrive(id, s0, out.root_decision);
  for (int t = 1; t < tree.stages; ++t) {
    const auto ids = tree.stage_nodes(t);
    detail::parallel_for(ids.size(), opt.threads, [&](std::size_t i) {
      const auto id = static_cast<std::size_t>(ids[i]);
      out.decision[id] = solve(ids[i], out.state[id]);
    });
    for (int id : ids) {
      for (int c : tree.node(id).children) arrive(c, out.state[static_cast<std::size_t>(id)], out.decision[static_cast<std::size_t>(id)]);
    }
  }
  for (int leaf : tree.leaves()) out.leaf_capital.emplace_back(leaf, out.state[static_cast<std::size_t>(leaf)]);
  return out;
}

struct CapitalRow {
  double capital = 0.0;
  double probability = 0.0;
  double cumulative = 0.0;
};

/// Distribution of terminal capital under the policy, weighted by the tree's
/// path probabilities and sorted ascending.
inline std::vector<CapitalRow> capital_distribution(const FloodInstance& inst,
                                                    const PolicySolution& policy,
                                                    const FloodModelConfig& cfg,
                                                    const DpOptions& opt = {}) {
  const auto fp = forward_pass(inst, policy, cfg.s0, cfg.delta, opt);
  std::vector<CapitalRow> rows;
  for (const auto& [leaf, S] : fp.leaf_capital) rows.push_back({S, path_probability(inst.tree, leaf), 0.0});
  std::stable_sort(rows.begin(), rows.end(),
                   [](const CapitalRow& a, const CapitalRow& b) { return a.capital < b.capital; });
  double cum = 0.0;
  for (auto& r : rows) r.cumulative = (cum += r.probability);
  return rows;
}

struct LoadRow {
  double load = 0.0;
  std::vector<double> mean_z;  // per decision stage, probability weighted
  std::vector<double> mean_x;
  double value = 0.0;
};

/// Probability-weighted mean decisions per stage along the forward pass.
inline void stage_means(const FloodInstance& inst, const ForwardPass& fp, std::vector<double>& mean_x,
                        std::vector<double>& mean_z) {
  const auto& tree = inst.tree;
  const auto T = static_cast<std::size_t>(tree.stages);
  mean_x.assign(T, 0.0);
  mean_z.assign(T, 0.0);
  mean_x[0] = fp.root_decision(0);
  mean_z[0] = fp.root_decision(2);
  std::vector<double> reach(tree.nodes.size(), 0.0);
  for (const auto& n : tree.nodes) {
    const double up = n.parent < 0 ? 1.0 : reach[static_cast<std::size_t>(n.parent)];
    reach[static_cast<std::size_t>(n.id)] = up * n.prob;
    if (n.children.empty()) continue;
    const auto& x = fp.decision[static_cast<std::size_t>(n.id)];
    mean_x[static_cast<std::size_t>(n.stage)] += reach[static_cast<std::size_t>(n.id)] * x(0);
    mean_z[static_cast<std::size_t>(n.stage)] += reach[static_cast<std::size_t>(n.id)] * x(2);
  }
}

/// Solves the model once per insurance load and reports decision means.
inline std::vector<LoadRow> load_sweep(const FloodModelConfig& cfg, const ScenarioTree& absolute,
                                       std::span<const double> loads, double theta = 0.0,
                                       const DpOptions& base = flood_options()) {
  if (loads.empty()) throw InputError("load sweep: empty load list");
  const auto traj = flood_trajectories(cfg);
  std::vector<LoadRow> rows;
  for (double V : loads) {
    FloodModelConfig c = cfg;
    c.load = V;
    const auto inst = build_model(c, absolute);
    DpOptions opt = base;
    opt.aggregate = robust_aggregate(theta);
    const auto sol = backward_solve(inst.model, inst.tree, traj, opt);
    const auto fp = forward_pass(inst, sol, c.s0, c.delta, opt);
    LoadRow row;
    row.load = V;
    row.value = sol.value();
    stage_means(inst, fp, row.mean_x, row.mean_z);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace ftree
