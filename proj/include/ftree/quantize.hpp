#pragma once

// W1-optimal quantization of scalar distributions by Lloyd iteration.
//
// Every distribution is handled as location + scale * X for a standardized
// variable X. Lloyd runs on X and the result is mapped back, so quantizing a
// rescaled law reproduces the rescaled quantization with identical
// probabilities.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ftree/detail/integrate.hpp"
#include "ftree/detail/parallel.hpp"
#include "ftree/detail/random.hpp"
#include "ftree/distributions.hpp"
#include "ftree/errors.hpp"

namespace ftree {

/// Scalar law given by the CDF and quantile function of a standardized
/// variable X plus an affine map location + scale * X.
struct DistributionView {
  std::function<double(double)> std_cdf;
  std::function<double(double)> std_quantile;
  /// Integral of the standardized quantile over [a, b] in [0, 1].
  std::function<double(double, double)> std_partial;
  bool finite_mean = true;
  double location = 0.0;
  double scale = 1.0;

  [[nodiscard]] double cdf(double x) const { return std_cdf((x - location) / scale); }
  [[nodiscard]] double quantile(double p) const { return location + scale * std_quantile(p); }
  [[nodiscard]] double partial_expectation(double a, double b) const {
    return location * (b - a) + scale * std_partial(a, b);
  }

  static DistributionView frechet(const FrechetParams& p) {
    require_valid(p);
    const FrechetParams unit{p.lambda, 1.0, 0.0};
    DistributionView v;
    v.std_cdf = [unit](double x) { return ftree::cdf(unit, x); };
    v.std_quantile = [unit](double q) {
      if (q <= 0.0) return 0.0;
      if (q >= 1.0) return std::numeric_limits<double>::infinity();
      return ftree::quantile(unit, q);
    };
    v.std_partial = [unit](double a, double b) {
      return ftree::partial_expectation(unit, a, b, 1e-14);
    };
    v.finite_mean = p.has_finite_mean();
    v.location = p.epsilon;
    v.scale = p.scale();
    return v;
  }

  static DistributionView uniform(double lo, double hi) {
    if (!(hi > lo)) throw ParameterError("uniform law needs hi > lo");
    DistributionView v;
    v.std_cdf = [](double x) { return std::clamp(x, 0.0, 1.0); };
    v.std_quantile = [](double q) { return std::clamp(q, 0.0, 1.0); };
    v.std_partial = [](double a, double b) { return 0.5 * (b * b - a * a); };
    v.location = lo;
    v.scale = hi - lo;
    return v;
  }

  /// Finite law on ascending atoms.
  static DistributionView discrete(std::vector<double> atoms, std::vector<double> weights) {
    if (atoms.empty() || atoms.size() != weights.size()) {
      throw InputError("discrete law needs matching, nonempty atoms and weights");
    }
    std::vector<double> cum(weights.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (!(weights[i] >= 0.0)) throw InputError("discrete law weights must be >= 0");
      if (i > 0 && !(atoms[i] > atoms[i - 1])) {
        throw InputError("discrete law atoms must be strictly increasing");
      }
      acc += weights[i];
      cum[i] = acc;
    }
    for (auto& c : cum) c /= acc;
    cum.back() = 1.0;
    DistributionView v;
    v.std_cdf = [atoms, cum](double x) {
      const auto it = std::upper_bound(atoms.begin(), atoms.end(), x);
      return it == atoms.begin() ? 0.0 : cum[static_cast<std::size_t>(it - atoms.begin()) - 1];
    };
    v.std_quantile = [atoms, cum](double q) {
      const auto it = std::lower_bound(cum.begin(), cum.end(), q);
      return atoms[std::min<std::size_t>(static_cast<std::size_t>(it - cum.begin()),
                                         atoms.size() - 1)];
    };
    v.std_partial = [atoms, cum](double a, double b) {
      double total = 0.0;
      double lo = 0.0;
      for (std::size_t i = 0; i < atoms.size(); ++i) {
        const double hi = cum[i];
        const double overlap = std::min(hi, b) - std::max(lo, a);
        if (overlap > 0.0) total += overlap * atoms[i];
        lo = hi;
      }
      return total;
    };
    return v;
  }

  /// Bounded law from a CDF and quantile; partial integrals use adaptive Simpson.
  static DistributionView from_functions(std::function<double(double)> cdf_fn,
                                         std::function<double(double)> quantile_fn) {
    DistributionView v;
    v.std_cdf = cdf_fn;
    v.std_quantile = quantile_fn;
    v.std_partial = [quantile_fn](double a, double b) {
      return detail::adaptive_simpson(quantile_fn, a, b, 1e-12);
    };
    return v;
  }
};

struct Quantization {
  std::vector<double> points;
  std::vector<double> probabilities;
  std::vector<double> breakpoints;  // interior cell boundaries, size n - 1
  double distortion = 0.0;
  int iterations = 0;
  bool converged = true;

  [[nodiscard]] std::size_t size() const { return points.size(); }
};

struct LloydConfig {
  std::vector<double> init_points;  // empty: quantile-spread start
  int max_iters = 10000;
  double rel_tol = 1e-10;
  int multistart = 1;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  bool record_history = false;
};

struct LloydResult {
  Quantization quantization;
  std::vector<double> history;  // distortion per iteration when recorded
  std::vector<std::string> warnings;
};

namespace detail {

inline void require_finite_mean(const DistributionView& dist) {
  if (!dist.finite_mean) {
    throw InfiniteMeanError("W1 distortion is infinite for a law without a finite mean");
  }
}

inline std::vector<double> midpoints(std::span<const double> z) {
  std::vector<double> q(z.size() > 0 ? z.size() - 1 : 0);
  for (std::size_t i = 0; i + 1 < z.size(); ++i) q[i] = 0.5 * (z[i] + z[i + 1]);
  return q;
}

/// Cumulative probabilities P_0 = 0, P_i = F(q_i), P_n = 1 on the standardized scale.
inline std::vector<double> cell_edges(const DistributionView& dist, std::span<const double> q) {
  std::vector<double> edges(q.size() + 2);
  edges.front() = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) edges[i + 1] = dist.std_cdf(q[i]);
  edges.back() = 1.0;
  return edges;
}

/// Sum over cells of the integral of |X - y_i| on the standardized scale.
inline double std_distortion(const DistributionView& dist, std::span<const double> y) {
  const auto edges = cell_edges(dist, midpoints(y));
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double a = edges[i];
    const double b = edges[i + 1];
    if (!(b > a)) continue;
    const double c = std::clamp(dist.std_cdf(y[i]), a, b);
    total += y[i] * (c - a) - dist.std_partial(a, c);
    total += dist.std_partial(c, b) - y[i] * (b - c);
  }
  return std::max(total, 0.0);
}

inline std::vector<double> spread_start(const DistributionView& dist, std::size_t n) {
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = dist.std_quantile((2.0 * static_cast<double>(i) + 1.0) / (2.0 * static_cast<double>(n)));
  }
  return y;
}

inline std::vector<double> jittered_start(const DistributionView& dist, std::size_t n,
                                          std::uint64_t seed) {
  UniformStream u(seed);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = dist.std_quantile((static_cast<double>(i) + u()) / static_cast<double>(n));
  }
  std::sort(y.begin(), y.end());
  return y;
}

inline LloydResult lloyd_standardized(const DistributionView& dist, std::vector<double> y,
                                      const LloydConfig& config) {
  const std::size_t n = y.size();
  LloydResult out;
  auto& qz = out.quantization;
  qz.converged = false;
  for (int it = 1; it <= config.max_iters; ++it) {
    const auto edges = cell_edges(dist, midpoints(y));
    double move = 0.0;
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double next = dist.std_quantile(0.5 * (edges[i] + edges[i + 1]));
      move = std::max(move, std::abs(next - y[i]));
      norm = std::max(norm, std::abs(next));
      y[i] = next;
    }
    for (std::size_t i = 1; i < n; ++i) {
      // Coincident points (possible for discrete laws) keep the order strict.
      if (!(y[i] > y[i - 1])) y[i] = std::nextafter(y[i - 1], std::numeric_limits<double>::infinity());
    }
    if (config.record_history) out.history.push_back(std_distortion(dist, y));
    qz.iterations = it;
    if (move <= config.rel_tol * std::max(norm, std::numeric_limits<double>::min())) {
      qz.converged = true;
      break;
    }
  }
  if (!qz.converged) {
    std::ostringstream os;
    os << "Lloyd iteration stopped at max_iters=" << config.max_iters << " without converging";
    out.warnings.push_back(os.str());
  }
  qz.points = y;
  qz.breakpoints = midpoints(y);
  const auto edges = cell_edges(dist, qz.breakpoints);
  qz.probabilities.resize(n);
  for (std::size_t i = 0; i < n; ++i) qz.probabilities[i] = edges[i + 1] - edges[i];
  qz.distortion = std_distortion(dist, y);
  return out;
}

inline void map_to_original(const DistributionView& dist, Quantization& qz) {
  for (auto& z : qz.points) z = dist.location + dist.scale * z;
  for (auto& q : qz.breakpoints) q = dist.location + dist.scale * q;
  qz.distortion *= dist.scale;
}

}  // namespace detail

/// Probabilities of the cells cut by the given interior breakpoints.
inline std::vector<double> probabilities_from_breakpoints(const DistributionView& dist,
                                                          std::span<const double> breakpoints) {
  for (std::size_t i = 1; i < breakpoints.size(); ++i) {
    if (!(breakpoints[i] > breakpoints[i - 1])) {
      throw InputError("breakpoints must be strictly increasing");
    }
  }
  std::vector<double> out(breakpoints.size() + 1);
  double prev = 0.0;
  for (std::size_t i = 0; i < breakpoints.size(); ++i) {
    const double f = dist.cdf(breakpoints[i]);
    out[i] = f - prev;
    prev = f;
  }
  out.back() = 1.0 - prev;
  return out;
}

/// Expected distance from a draw to its nearest point.
inline double distortion(const DistributionView& dist, std::span<const double> points) {
  detail::require_finite_mean(dist);
  if (points.empty()) throw InputError("distortion needs at least one point");
  std::vector<double> y(points.begin(), points.end());
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (i > 0 && !(points[i] > points[i - 1])) {
      throw InputError("quantization points must be strictly increasing");
    }
    y[i] = (points[i] - dist.location) / dist.scale;
  }
  return dist.scale * detail::std_distortion(dist, y);
}

/// Lloyd iteration for the W1 quantizer: cells split at midpoints, each point
/// moved to the median of its cell. Multistart runs differ only in the start
/// and the lowest distortion wins (ties by start index).
inline LloydResult lloyd_w1_detailed(const DistributionView& dist, std::size_t n,
                                     const LloydConfig& config = {}) {
  detail::require_finite_mean(dist);
  if (n == 0) throw InputError("quantization needs n >= 1");
  if (!(config.rel_tol > 0.0)) throw InputError("rel_tol must be positive");
  if (config.multistart < 1) throw InputError("multistart must be >= 1");

  std::vector<double> first;
  if (!config.init_points.empty()) {
    if (config.init_points.size() != n) throw InputError("init_points size must equal n");
    first.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      first[i] = (config.init_points[i] - dist.location) / dist.scale;
    }
    std::sort(first.begin(), first.end());
  } else {
    first = detail::spread_start(dist, n);
  }

  const auto starts = static_cast<std::size_t>(config.multistart);
  std::vector<LloydResult> runs(starts);
  detail::parallel_for(starts, config.threads, [&](std::size_t k) {
    auto init = k == 0 ? first : detail::jittered_start(dist, n, detail::derive_seed(config.seed, k));
    runs[k] = detail::lloyd_standardized(dist, std::move(init), config);
  });
  std::size_t best = 0;
  for (std::size_t k = 1; k < starts; ++k) {
    if (runs[k].quantization.distortion < runs[best].quantization.distortion) best = k;
  }
  LloydResult out = std::move(runs[best]);
  detail::map_to_original(dist, out.quantization);
  for (auto& h : out.history) h *= dist.scale;
  return out;
}

inline Quantization lloyd_w1(const DistributionView& dist, std::size_t n,
                             const LloydConfig& config = {}) {
  return lloyd_w1_detailed(dist, n, config).quantization;
}

/// Median-ratio recursion: points, breakpoints and distortion scale by the
/// ratio while the probabilities are carried over unchanged.
inline Quantization scale(const Quantization& q, double ratio) {
  if (!(ratio > 0.0) || !std::isfinite(ratio)) throw DomainError("scale ratio must be positive");
  Quantization out = q;
  for (auto& z : out.points) z *= ratio;
  for (auto& b : out.breakpoints) b *= ratio;
  out.distortion *= ratio;
  return out;
}

struct ConvergenceProbe {
  std::vector<std::size_t> n_values;
  std::vector<double> distortions;
  double slope = 0.0;  // least-squares slope of log distortion against log n
};

inline ConvergenceProbe convergence_probe(const DistributionView& dist,
                                          std::span<const std::size_t> n_values,
                                          const LloydConfig& config = {}) {
  if (n_values.size() < 2) throw InputError("convergence probe needs at least two sizes");
  ConvergenceProbe out;
  out.n_values.assign(n_values.begin(), n_values.end());
  out.distortions.resize(n_values.size());
  detail::parallel_for(n_values.size(), config.threads, [&](std::size_t i) {
    LloydConfig c = config;
    c.threads = 1;
    out.distortions[i] = lloyd_w1(dist, n_values[i], c).distortion;
  });
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < n_values.size(); ++i) {
    lx.push_back(std::log(static_cast<double>(n_values[i])));
    ly.push_back(std::log(out.distortions[i]));
  }
  out.slope = detail::least_squares_line(lx, ly).slope;
  return out;
}

}  // namespace ftree
