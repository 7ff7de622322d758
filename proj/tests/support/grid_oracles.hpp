#pragma once

// Grid searches used as oracles for the worst-case expectation and the
// shape-constrained fit.

#include <cmath>
#include <limits>
#include <vector>

namespace ftree::testing {

/// min sum q_i v_i over the simplex lattice (step h) for three outcomes,
/// keeping only points with divergence <= theta.
inline double worst_case_grid3(const std::vector<double>& v, const std::vector<double>& p,
                               double theta, double h = 1e-3) {
  double best = std::numeric_limits<double>::infinity();
  const int n = static_cast<int>(std::lround(1.0 / h));
  for (int i = 1; i < n; ++i) {
    for (int j = 1; i + j < n; ++j) {
      const double q[3] = {i * h, j * h, 1.0 - (i + j) * h};
      double div = 0.0;
      for (int k = 0; k < 3; ++k) div += (p[k] - q[k]) * (p[k] - q[k]) / q[k];
      if (div > theta) continue;
      best = std::min(best, q[0] * v[0] + q[1] * v[1] + q[2] * v[2]);
    }
  }
  return best;
}

/// Smallest sum of squares of a s^2 + 2 b s + c against the data over a box
/// lattice, restricted to a >= 0 and a s + b >= 0 at the samples.
inline double convex_increasing_fit_grid(const std::vector<double>& s, const std::vector<double>& y,
                                         double lo, double hi, double step) {
  double best = std::numeric_limits<double>::infinity();
  const int n = static_cast<int>(std::lround((hi - lo) / step));
  for (int ia = 0; ia <= n; ++ia) {
    const double a = lo + ia * step;
    if (a < 0.0) continue;
    for (int ib = 0; ib <= n; ++ib) {
      const double b = lo + ib * step;
      bool ok = true;
      for (double x : s) ok = ok && a * x + b >= -1e-12;
      if (!ok) continue;
      for (int ic = 0; ic <= n; ++ic) {
        const double c = lo + ic * step;
        double r = 0.0;
        for (std::size_t k = 0; k < s.size(); ++k) {
          const double e = a * s[k] * s[k] + 2.0 * b * s[k] + c - y[k];
          r += e * e;
        }
        best = std::min(best, r);
      }
    }
  }
  return best;
}

}  // namespace ftree::testing
