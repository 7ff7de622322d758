#pragma once

#include <cmath>
#include <utility>

namespace ftree::detail {

template <class F>
double simpson_step(F& f, double a, double fa, double b, double fb, double whole, double m,
                    double fm, double tol, int depth) {
  const double lm = 0.5 * (a + m);
  const double rm = 0.5 * (m + b);
  const double flm = f(lm);
  const double frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol) {
    return left + right + delta / 15.0;
  }
  return simpson_step(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1) +
         simpson_step(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1);
}

/// Adaptive Simpson quadrature with Richardson correction.
///
/// The interval is pre-split into `pieces` panels so that narrow features are
/// not missed by the first coarse estimate.
template <class F>
double adaptive_simpson(F&& f, double a, double b, double abs_tol, int max_depth = 48,
                        int pieces = 8) {
  if (!(b > a)) return 0.0;
  const double h = (b - a) / pieces;
  double total = 0.0;
  double x0 = a;
  double f0 = f(x0);
  for (int i = 0; i < pieces; ++i) {
    const double x1 = (i + 1 == pieces) ? b : a + (i + 1) * h;
    const double f1 = f(x1);
    const double m = 0.5 * (x0 + x1);
    const double fm = f(m);
    const double whole = (x1 - x0) / 6.0 * (f0 + 4.0 * fm + f1);
    total += simpson_step(f, x0, f0, x1, f1, whole, m, fm, abs_tol / pieces, max_depth);
    x0 = x1;
    f0 = f1;
  }
  return total;
}

}  // namespace ftree::detail
