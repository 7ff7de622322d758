#pragma once

// Kantorovich distances between scalar laws, exact small-instance transport,
// the nested distance between scenario trees, and the stage-wise bound.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <utility>
#include <vector>

#include "ftree/detail/integrate.hpp"
#include "ftree/detail/parallel.hpp"
#include "ftree/errors.hpp"
#include "ftree/quantize.hpp"
#include "ftree/tree.hpp"

namespace ftree {

struct DiscreteMeasure1D {
  std::vector<double> atoms;
  std::vector<double> weights;

  void validate() const {
    if (atoms.empty() || atoms.size() != weights.size()) {
      throw InputError("discrete measure needs matching, nonempty atoms and weights");
    }
    double s = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw InputError("discrete measure weights must be >= 0");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-12) throw InputError("discrete measure weights must sum to 1");
  }
};

/// Exact W1 on the line: integral of |F_a - F_b| over merged breakpoints.
inline double kantorovich_1d(const DiscreteMeasure1D& a, const DiscreteMeasure1D& b) {
  a.validate();
  b.validate();
  std::vector<std::pair<double, double>> events;  // (location, signed weight)
  events.reserve(a.atoms.size() + b.atoms.size());
  for (std::size_t i = 0; i < a.atoms.size(); ++i) events.emplace_back(a.atoms[i], a.weights[i]);
  for (std::size_t i = 0; i < b.atoms.size(); ++i) events.emplace_back(b.atoms[i], -b.weights[i]);
  std::sort(events.begin(), events.end(),
            [](const auto& x, const auto& y) { return x.first < y.first; });
  double total = 0.0;
  double diff = 0.0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    diff += events[i].second;
    if (i + 1 < events.size()) total += std::abs(diff) * (events[i + 1].first - events[i].first);
  }
  return total;
}

/// W1 between a continuous law and a quantization, integrated in loss space.
///
/// Interior segments between adjacent points are integrated directly with
/// adaptive Simpson, split where F crosses the step level. The two unbounded
/// tails use the integration-by-parts identities
///   int_{-inf}^{z} F = z F(z) - int_0^{F(z)} Q,   int_z^{inf} (1-F) = int_{F(z)}^1 Q - z (1-F(z)).
inline double semidiscrete_kantorovich(const DistributionView& dist, const Quantization& q,
                                       double abs_tol = 1e-12) {
  detail::require_finite_mean(dist);
  const std::size_t n = q.size();
  if (n == 0 || q.probabilities.size() != n) throw InputError("quantization is malformed");
  double total = 0.0;
  const double z1 = q.points.front();
  const double f1 = dist.cdf(z1);
  total += z1 * f1 - dist.partial_expectation(0.0, f1);
  const double zn = q.points.back();
  const double fn = dist.cdf(zn);
  total += dist.partial_expectation(fn, 1.0) - zn * (1.0 - fn);
  double level = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    level += q.probabilities[i];
    const double a = q.points[i];
    const double b = q.points[i + 1];
    auto gap = [&](double x) { return std::abs(dist.cdf(x) - level); };
    double cross = a;
    if (level > dist.cdf(a) && level < dist.cdf(b)) cross = std::clamp(dist.quantile(level), a, b);
    total += detail::adaptive_simpson(gap, a, cross, abs_tol) +
             detail::adaptive_simpson(gap, cross, b, abs_tol);
  }
  return total;
}

struct TransportPlan {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> plan;  // row-major
  double cost = 0.0;

  [[nodiscard]] double at(std::size_t i, std::size_t j) const { return plan[i * cols + j]; }
};

namespace detail {

/// Min-cost flow by successive shortest paths with Dijkstra on reduced costs.
/// The transport network is source -> rows -> columns -> sink; row-to-column
/// arcs are uncapacitated, so every augmentation saturates a supply arc, a
/// demand arc, or a residual backward arc.
class TransportSolver {
 public:
  TransportSolver(std::size_t m, std::size_t n, std::span<const double> cost)
      : m_(m), n_(n), cost_(cost.begin(), cost.end()) {}

  double solve(std::span<const double> supply, std::span<const double> demand) {
    const double lo = *std::min_element(cost_.begin(), cost_.end());
    const std::size_t S = m_ + n_;
    const std::size_t T = S + 1;
    const std::size_t V = T + 1;
    head_.assign(V, -1);
    arcs_.clear();
    for (std::size_t i = 0; i < m_; ++i) add_arc(S, i, supply[i], 0.0);
    std::vector<std::size_t> middle(m_ * n_);
    for (std::size_t i = 0; i < m_; ++i) {
      for (std::size_t j = 0; j < n_; ++j) {
        middle[i * n_ + j] = arcs_.size();
        add_arc(i, m_ + j, std::numeric_limits<double>::infinity(), cost_[i * n_ + j] - lo);
      }
    }
    for (std::size_t j = 0; j < n_; ++j) add_arc(m_ + j, T, demand[j], 0.0);

    double need = 0.0;
    for (double s : supply) need += s;
    const double eps = 1e-15;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> pot(V, 0.0), dist(V);
    std::vector<long> via(V);
    std::vector<char> done(V);
    const std::size_t cap = 8 * (m_ + n_ + 2) * (m_ + n_ + 2);
    std::size_t rounds = 0;
    while (need > 1e-14) {
      if (++rounds > cap) throw SolverError("transport solver exceeded its augmentation cap");
      std::fill(dist.begin(), dist.end(), inf);
      std::fill(via.begin(), via.end(), -1);
      std::fill(done.begin(), done.end(), 0);
      dist[S] = 0.0;
      for (;;) {
        std::size_t u = V;
        for (std::size_t v = 0; v < V; ++v) {
          if (!done[v] && dist[v] < inf && (u == V || dist[v] < dist[u])) u = v;
        }
        if (u == V) break;
        done[u] = 1;
        for (long e = head_[u]; e >= 0; e = arcs_[static_cast<std::size_t>(e)].next) {
          const auto& a = arcs_[static_cast<std::size_t>(e)];
          if (a.cap <= eps) continue;
          const double rc = a.cost + pot[u] - pot[a.to];
          const double cand = dist[u] + std::max(rc, 0.0);
          if (cand < dist[a.to]) {
            dist[a.to] = cand;
            via[a.to] = e;
          }
        }
      }
      if (!(dist[T] < inf)) break;  // remaining mass is below the thresholds
      for (std::size_t v = 0; v < V; ++v) {
        if (dist[v] < inf) pot[v] += dist[v];
      }
      double amount = inf;
      for (std::size_t v = T; v != S;) {
        const auto& a = arcs_[static_cast<std::size_t>(via[v])];
        amount = std::min(amount, a.cap);
        v = arcs_[static_cast<std::size_t>(via[v]) ^ 1u].to;
      }
      for (std::size_t v = T; v != S;) {
        const auto e = static_cast<std::size_t>(via[v]);
        arcs_[e].cap -= amount;
        if (arcs_[e].cap < eps) arcs_[e].cap = 0.0;
        arcs_[e ^ 1u].cap += amount;
        v = arcs_[e ^ 1u].to;
      }
      need -= amount;
    }
    flow_.assign(m_ * n_, 0.0);
    double total = 0.0;
    for (std::size_t k = 0; k < middle.size(); ++k) {
      flow_[k] = arcs_[middle[k] ^ 1u].cap;  // backward residual equals the flow
      total += flow_[k] * cost_[k];
    }
    return total;
  }

  [[nodiscard]] const std::vector<double>& flow() const { return flow_; }

 private:
  struct Arc {
    std::size_t to;
    double cap;
    double cost;
    long next;
  };

  void add_arc(std::size_t from, std::size_t to, double cap, double cost) {
    arcs_.push_back({to, cap, cost, head_[from]});
    head_[from] = static_cast<long>(arcs_.size() - 1);
    arcs_.push_back({from, 0.0, -cost, head_[to]});
    head_[to] = static_cast<long>(arcs_.size() - 1);
  }

  std::size_t m_, n_;
  std::vector<double> cost_;
  std::vector<double> flow_;
  std::vector<Arc> arcs_;
  std::vector<long> head_;
};

}  // namespace detail

/// Exact optimal transport for a row-major cost matrix.
inline TransportPlan transport_lp(std::span<const double> cost, std::size_t rows, std::size_t cols,
                                  std::span<const double> source, std::span<const double> target) {
  if (rows == 0 || cols == 0 || source.size() != rows || target.size() != cols ||
      cost.size() != rows * cols) {
    throw InputError("transport problem dimensions do not match");
  }
  double sa = 0.0, sb = 0.0;
  for (double w : source) {
    if (!(w >= 0.0)) throw InputError("transport weights must be >= 0");
    sa += w;
  }
  for (double w : target) {
    if (!(w >= 0.0)) throw InputError("transport weights must be >= 0");
    sb += w;
  }
  if (std::abs(sa - sb) > 1e-9) {
    std::ostringstream os;
    os << "transport marginals differ in mass: " << sa << " vs " << sb;
    throw InputError(os.str());
  }
  for (double c : cost) {
    if (!std::isfinite(c)) throw InputError("transport cost must be finite");
  }
  std::vector<double> supply(source.begin(), source.end());
  std::vector<double> demand(target.begin(), target.end());
  for (auto& d : demand) d *= sa / sb;
  detail::TransportSolver solver(rows, cols, cost);
  TransportPlan out;
  out.rows = rows;
  out.cols = cols;
  out.cost = solver.solve(supply, demand);
  out.plan = solver.flow();
  return out;
}

inline TransportPlan transport_lp(const std::vector<std::vector<double>>& cost,
                                  std::span<const double> source, std::span<const double> target) {
  std::vector<double> flat;
  for (const auto& row : cost) {
    if (row.size() != target.size()) throw InputError("cost matrix rows must match target size");
    flat.insert(flat.end(), row.begin(), row.end());
  }
  return transport_lp(flat, cost.size(), target.size(), source, target);
}

namespace detail {

inline void require_same_depth(const ScenarioTree& a, const ScenarioTree& b) {
  if (a.stages != b.stages) {
    std::ostringstream os;
    os << "trees have different depths: " << a.stages << " vs " << b.stages;
    throw InputError(os.str());
  }
  if (a.nodes.empty() || b.nodes.empty()) throw InputError("trees must not be empty");
}

/// Additive path distance sum_s |xi_s - xi'_s| for every pair of stage-t nodes.
inline std::vector<double> path_distances(const ScenarioTree& a, const std::vector<int>& ia,
                                          const ScenarioTree& b, const std::vector<int>& ib) {
  std::vector<double> d(ia.size() * ib.size());
  for (std::size_t i = 0; i < ia.size(); ++i) {
    const auto pa = a.path(ia[i]);
    for (std::size_t j = 0; j < ib.size(); ++j) {
      const auto pb = b.path(ib[j]);
      double s = 0.0;
      for (std::size_t t = 0; t < pa.size(); ++t) {
        s += std::abs(a.node(pa[t]).value - b.node(pb[t]).value);
      }
      d[i * ib.size() + j] = s;
    }
  }
  return d;
}

inline DiscreteMeasure1D children_measure(const ScenarioTree& t, int id) {
  DiscreteMeasure1D m;
  std::vector<std::pair<double, double>> items;
  for (int c : t.children_of(id)) items.emplace_back(t.node(c).value, t.node(c).prob);
  std::sort(items.begin(), items.end());
  double s = 0.0;
  for (const auto& [v, p] : items) s += p;
  for (const auto& [v, p] : items) {
    m.atoms.push_back(v);
    m.weights.push_back(p / s);
  }
  return m;
}

inline double subtree_transport(const ScenarioTree& a, int u, const ScenarioTree& b, int v,
                                const std::vector<int>& pos_a, const std::vector<int>& pos_b,
                                const std::vector<double>& next, std::size_t next_cols) {
  const auto& ca = a.children_of(u);
  const auto& cb = b.children_of(v);
  std::vector<double> cost(ca.size() * cb.size());
  std::vector<double> pa(ca.size()), pb(cb.size());
  for (std::size_t i = 0; i < ca.size(); ++i) {
    pa[i] = a.node(ca[i]).prob;
    for (std::size_t j = 0; j < cb.size(); ++j) {
      cost[i * cb.size() + j] =
          next[static_cast<std::size_t>(pos_a[static_cast<std::size_t>(ca[i])]) * next_cols +
               static_cast<std::size_t>(pos_b[static_cast<std::size_t>(cb[j])])];
    }
  }
  for (std::size_t j = 0; j < cb.size(); ++j) pb[j] = b.node(cb[j]).prob;
  return transport_lp(cost, ca.size(), cb.size(), pa, pb).cost;
}

}  // namespace detail

/// Nested distance with the additive path distance, by backward recursion.
inline double nested_distance(const ScenarioTree& a, const ScenarioTree& b, unsigned threads = 1) {
  detail::require_same_depth(a, b);
  const int T = a.stages;
  // pos[id] = position of the node within its stage list.
  std::vector<int> pos_a(a.nodes.size()), pos_b(b.nodes.size());
  std::vector<std::vector<int>> stage_a(static_cast<std::size_t>(T) + 1),
      stage_b(static_cast<std::size_t>(T) + 1);
  for (int t = 1; t <= T; ++t) {
    stage_a[static_cast<std::size_t>(t)] = a.stage_nodes(t);
    stage_b[static_cast<std::size_t>(t)] = b.stage_nodes(t);
    const auto& la = stage_a[static_cast<std::size_t>(t)];
    const auto& lb = stage_b[static_cast<std::size_t>(t)];
    for (std::size_t i = 0; i < la.size(); ++i) pos_a[static_cast<std::size_t>(la[i])] = static_cast<int>(i);
    for (std::size_t i = 0; i < lb.size(); ++i) pos_b[static_cast<std::size_t>(lb[i])] = static_cast<int>(i);
  }
  for (const auto& n : a.nodes) {
    if (n.stage < T && n.children.empty()) throw InputError("tree A has a leaf above the final stage");
  }
  for (const auto& n : b.nodes) {
    if (n.stage < T && n.children.empty()) throw InputError("tree B has a leaf above the final stage");
  }
  const auto& leaves_a = stage_a[static_cast<std::size_t>(T)];
  const auto& leaves_b = stage_b[static_cast<std::size_t>(T)];
  std::vector<double> next = detail::path_distances(a, leaves_a, b, leaves_b);
  std::size_t next_cols = leaves_b.size();
  for (int t = T - 1; t >= 1; --t) {
    const auto& ia = stage_a[static_cast<std::size_t>(t)];
    const auto& ib = stage_b[static_cast<std::size_t>(t)];
    std::vector<double> cur(ia.size() * ib.size());
    detail::parallel_for(cur.size(), threads, [&](std::size_t k) {
      cur[k] = detail::subtree_transport(a, ia[k / ib.size()], b, ib[k % ib.size()], pos_a, pos_b,
                                         next, next_cols);
    });
    next = std::move(cur);
    next_cols = ib.size();
  }
  return detail::subtree_transport(a, -1, b, -1, pos_a, pos_b, next, next_cols);
}

struct LipschitzBounds {
  double L1 = 1.0;
  std::vector<double> Lt;  // L_2..L_T

  void validate() const {
    if (!(L1 >= 0.0)) throw InputError("Lipschitz constants must be >= 0");
    for (double l : Lt) {
      if (!(l >= 0.0)) throw InputError("Lipschitz constants must be >= 0");
    }
  }
  [[nodiscard]] double factor(int s) const {  // L_s for s >= 2
    const auto k = static_cast<std::size_t>(s - 2);
    return k < Lt.size() ? Lt[k] : 0.0;
  }
};

/// sum_t d_t * prod_{s=t+1}^{T} (L_s + 1).
inline double stagewise_upper_bound(std::span<const double> per_stage, const LipschitzBounds& L) {
  L.validate();
  const int T = static_cast<int>(per_stage.size());
  double total = 0.0;
  for (int t = 1; t <= T; ++t) {
    const double d = per_stage[static_cast<std::size_t>(t - 1)];
    if (!(d >= 0.0)) throw InputError("per-stage distances must be >= 0");
    double prod = 1.0;
    for (int s = t + 1; s <= T; ++s) prod *= L.factor(s) + 1.0;
    total += d * prod;
  }
  return total;
}

/// c * L1 * n^(-1/r1) * sum_t prod_{s>t} (L_s + 1); reporting only.
inline double error_bound(std::size_t n, int r1, const LipschitzBounds& L, double c, int T) {
  L.validate();
  if (n < 1 || r1 < 1 || T < 1) throw InputError("error bound needs n >= 1, r1 >= 1, T >= 1");
  double sum = 0.0;
  for (int t = 1; t <= T; ++t) {
    double prod = 1.0;
    for (int s = t + 1; s <= T; ++s) prod *= L.factor(s) + 1.0;
    sum += prod;
  }
  return c * L.L1 * std::pow(static_cast<double>(n), -1.0 / r1) * sum;
}

struct StagewiseInputs {
  std::vector<double> per_stage;  // d_1..d_T
  LipschitzBounds bounds;
};

/// Per-stage distances and constants estimated from a tree pair.
///
/// L_t is the largest within-tree ratio of children W1 to the path distance
/// of the two parents. d_1 is the W1 between the stage-1 laws; for t >= 2,
/// d_t = max over cross pairs (u, v) of [W1(children(u), children(v)) - L_t * d(u, v)]_+.
/// With these choices the bound dominates the nested distance (induction over
/// stages with the W1-optimal conditional coupling).
inline StagewiseInputs stagewise_inputs(const ScenarioTree& a, const ScenarioTree& b) {
  detail::require_same_depth(a, b);
  const int T = a.stages;
  StagewiseInputs out;
  out.per_stage.assign(static_cast<std::size_t>(T), 0.0);
  out.per_stage[0] = kantorovich_1d(detail::children_measure(a, -1), detail::children_measure(b, -1));
  auto within = [](const ScenarioTree& t, const std::vector<int>& ids) {
    double best = 0.0;
    const auto d = detail::path_distances(t, ids, t, ids);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      for (std::size_t j = i + 1; j < ids.size(); ++j) {
        const double w = kantorovich_1d(detail::children_measure(t, ids[i]),
                                        detail::children_measure(t, ids[j]));
        const double dist = d[i * ids.size() + j];
        if (dist > 0.0) {
          best = std::max(best, w / dist);
        }
      }
    }
    return best;
  };
  for (int t = 2; t <= T; ++t) {
    const auto ia = a.stage_nodes(t - 1);
    const auto ib = b.stage_nodes(t - 1);
    const double L = std::max(within(a, ia), within(b, ib));
    out.bounds.Lt.push_back(L);
    const auto d = detail::path_distances(a, ia, b, ib);
    double worst = 0.0;
    for (std::size_t i = 0; i < ia.size(); ++i) {
      const auto ma = detail::children_measure(a, ia[i]);
      for (std::size_t j = 0; j < ib.size(); ++j) {
        const double w = kantorovich_1d(ma, detail::children_measure(b, ib[j]));
        worst = std::max(worst, w - L * d[i * ib.size() + j]);
      }
    }
    out.per_stage[static_cast<std::size_t>(t - 1)] = worst;
  }
  return out;
}

}  // namespace ftree
