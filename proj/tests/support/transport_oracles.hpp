#pragma once

#include <Eigen/Dense>
#include <limits>
#include <vector>

namespace ftree::testing {

// Minimum cost over all basic feasible solutions of a 3x3 transport problem:
// every 5-cell support whose constraint columns are independent.
inline double vertex_enumeration_3x3(const std::vector<double>& cost, const std::vector<double>& a,
                                     const std::vector<double>& b) {
  double best = std::numeric_limits<double>::infinity();
  for (int mask = 0; mask < (1 << 9); ++mask) {
    if (__builtin_popcount(static_cast<unsigned>(mask)) != 5) continue;
    std::vector<int> cells;
    for (int k = 0; k < 9; ++k) {
      if (mask & (1 << k)) cells.push_back(k);
    }
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(6, 5);
    Eigen::VectorXd rhs(6);
    for (int i = 0; i < 3; ++i) rhs(i) = a[static_cast<std::size_t>(i)];
    for (int j = 0; j < 3; ++j) rhs(3 + j) = b[static_cast<std::size_t>(j)];
    for (int c = 0; c < 5; ++c) {
      M(cells[static_cast<std::size_t>(c)] / 3, c) = 1.0;
      M(3 + cells[static_cast<std::size_t>(c)] % 3, c) = 1.0;
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
    if (lu.rank() != 5) continue;
    const Eigen::VectorXd x = M.colPivHouseholderQr().solve(rhs);
    if ((M * x - rhs).norm() > 1e-12 || x.minCoeff() < -1e-13) continue;
    double c = 0.0;
    for (int k = 0; k < 5; ++k) c += x(k) * cost[static_cast<std::size_t>(cells[static_cast<std::size_t>(k)])];
    best = std::min(best, c);
  }
  return best;
}

}  // namespace ftree::testing
