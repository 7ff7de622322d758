#pragma once

// Primal active-set method for small strictly convex quadratic programs
//   minimize 0.5 x'Hx - g'x  subject to  C x >= d,
// started from a feasible point. Blocking constraints enter the working set
// one at a time, so the working-set normals stay linearly independent.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace ftree::detail {

struct QpResult {
  Eigen::VectorXd x;
  std::vector<int> working_set;
  int iterations = 0;
  bool converged = false;
};

inline QpResult solve_qp_active_set(const Eigen::MatrixXd& H, const Eigen::VectorXd& g,
                                    const Eigen::MatrixXd& C, const Eigen::VectorXd& d,
                                    Eigen::VectorXd x0, double tol = 1e-12,
                                    int max_iters = 0) {
  const Eigen::Index n = H.rows();
  const Eigen::Index m = C.rows();
  if (max_iters <= 0) max_iters = static_cast<int>(20 * (n + m) + 100);
  QpResult r;
  r.x = std::move(x0);
  std::vector<int>& W = r.working_set;
  std::vector<char> in_w(static_cast<std::size_t>(m), 0);
  for (; r.iterations < max_iters; ++r.iterations) {
    const Eigen::VectorXd grad = H * r.x - g;
    const auto w = static_cast<Eigen::Index>(W.size());
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + w, n + w);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + w);
    K.topLeftCorner(n, n) = H;
    for (Eigen::Index k = 0; k < w; ++k) {
      const auto row = C.row(W[static_cast<std::size_t>(k)]);
      K.block(0, n + k, n, 1) = -row.transpose();
      K.block(n + k, 0, 1, n) = row;
    }
    rhs.head(n) = -grad;
    const Eigen::VectorXd sol = K.fullPivLu().solve(rhs);
    const Eigen::VectorXd p = sol.head(n);
    const double scale = 1.0 + r.x.cwiseAbs().maxCoeff();
    if (p.cwiseAbs().maxCoeff() <= tol * scale) {
      Eigen::Index worst = -1;
      double most_negative = -tol * (1.0 + grad.cwiseAbs().maxCoeff());
      for (Eigen::Index k = 0; k < w; ++k) {
        if (sol(n + k) < most_negative) {
          most_negative = sol(n + k);
          worst = k;
        }
      }
      if (worst < 0) {
        r.converged = true;
        return r;
      }
      in_w[static_cast<std::size_t>(W[static_cast<std::size_t>(worst)])] = 0;
      W.erase(W.begin() + worst);
      continue;
    }
    double alpha = 1.0;
    int blocking = -1;
    for (Eigen::Index i = 0; i < m; ++i) {
      if (in_w[static_cast<std::size_t>(i)]) continue;
      const double cp = C.row(i).dot(p);
      if (cp >= -1e-14 * (1.0 + p.cwiseAbs().maxCoeff())) continue;
      const double slack = std::max(0.0, C.row(i).dot(r.x) - d(i));
      const double a = slack / -cp;
      if (a < alpha) {
        alpha = a;
        blocking = static_cast<int>(i);
      }
    }
    r.x += alpha * p;
    if (blocking >= 0) {
      W.push_back(blocking);
      in_w[static_cast<std::size_t>(blocking)] = 1;
    }
  }
  return r;
}

}  // namespace ftree::detail
