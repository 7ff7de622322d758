#pragma once

// Textbook two-phase tableau simplex with Bland's rule. Used only as an
// independent oracle for small linear programs in the test suite.

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

namespace ftree::testing {

struct LinearProgram {
  // minimize c^T x subject to A x = b, x >= 0 (dense, row-major A).
  std::vector<std::vector<double>> A;
  std::vector<double> b;
  std::vector<double> c;
};

struct LpSolution {
  double objective = 0.0;
  std::vector<double> x;
};

inline std::optional<LpSolution> solve_dense_lp(LinearProgram lp, double tol = 1e-11,
                                               double pivot_tol = 1e-9) {
  const std::size_t m = lp.A.size();
  const std::size_t n = lp.c.size();
  for (std::size_t i = 0; i < m; ++i) {
    if (lp.b[i] < 0.0) {
      for (auto& v : lp.A[i]) v = -v;
      lp.b[i] = -lp.b[i];
    }
  }
  // Columns: n originals, m artificials, then the right-hand side.
  const std::size_t cols = n + m + 1;
  std::vector<std::vector<double>> t(m + 1, std::vector<double>(cols, 0.0));
  std::vector<std::size_t> basis(m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) t[i][j] = lp.A[i][j];
    t[i][n + i] = 1.0;
    t[i][cols - 1] = lp.b[i];
    basis[i] = n + i;
  }
  auto pivot = [&](std::size_t r, std::size_t c) {
    const double p = t[r][c];
    for (auto& v : t[r]) v /= p;
    for (std::size_t i = 0; i <= m; ++i) {
      if (i == r || t[i][c] == 0.0) continue;
      const double f = t[i][c];
      for (std::size_t j = 0; j < cols; ++j) t[i][j] -= f * t[r][j];
    }
    basis[r] = c;
  };
  auto run = [&](std::size_t allowed) -> bool {
    for (int guard = 0; guard < 100000; ++guard) {
      std::size_t enter = cols;
      for (std::size_t j = 0; j < allowed; ++j) {
        if (t[m][j] < -tol) {
          enter = j;
          break;
        }
      }
      if (enter == cols) return true;
      std::size_t leave = m;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < m; ++i) {
        if (t[i][enter] > pivot_tol) {
          const double ratio = t[i][cols - 1] / t[i][enter];
          // Among near-ties prefer the largest pivot element for stability.
          if (ratio < best - 1e-12 ||
              (ratio <= best + 1e-12 && leave < m && t[i][enter] > t[leave][enter])) {
            best = ratio;
            leave = i;
          }
        }
      }
      if (leave == m) return false;  // unbounded
      pivot(leave, enter);
    }
    return false;
  };
  // Phase 1: minimize the sum of artificials.
  for (std::size_t j = 0; j < cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += t[i][j];
    t[m][j] = (j >= n && j < n + m) ? 0.0 : -s;
  }
  if (!run(n + m)) return std::nullopt;
  if (-t[m][cols - 1] > 1e-9) return std::nullopt;  // infeasible
  for (std::size_t i = 0; i < m; ++i) {
    if (basis[i] < n) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (std::abs(t[i][j]) > tol) {
        pivot(i, j);
        break;
      }
    }
  }
  // Phase 2 objective row.
  for (std::size_t j = 0; j < cols; ++j) t[m][j] = 0.0;
  for (std::size_t j = 0; j < n; ++j) t[m][j] = lp.c[j];
  for (std::size_t i = 0; i < m; ++i) {
    if (basis[i] < n) {
      const double f = t[m][basis[i]];
      for (std::size_t j = 0; j < cols; ++j) t[m][j] -= f * t[i][j];
    }
  }
  if (!run(n)) return std::nullopt;
  LpSolution s;
  s.x.assign(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    if (basis[i] < n) s.x[basis[i]] = t[i][cols - 1];
  }
  for (std::size_t j = 0; j < n; ++j) s.objective += lp.c[j] * s.x[j];
  return s;
}

}  // namespace ftree::testing
