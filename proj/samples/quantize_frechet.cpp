// Quantizes a heavy-tailed Frechet loss law with n = 1..8 points and prints
// the points, their probabilities and the W1 distortion, then scales the
// n = 4 quantizer to a law with twice the median.

#include <cstdio>

#include "ftree/distributions.hpp"
#include "ftree/quantize.hpp"

int main() {
  const ftree::FrechetParams law{0.5, 1.0, 0.0};
  const auto dist = ftree::DistributionView::frechet(law);
  for (std::size_t n = 1; n <= 8; ++n) {
    const auto q = ftree::lloyd_w1(dist, n);
    std::printf("n = %zu  distortion %.6f\n", n, q.distortion);
    for (std::size_t i = 0; i < q.size(); ++i) {
      std::printf("  point %10.4f  prob %.4f\n", q.points[i], q.probabilities[i]);
    }
  }
  const auto q4 = ftree::lloyd_w1(dist, 4);
  const auto doubled = ftree::scale(q4, 2.0);
  std::printf("scaled n = 4: distortion %.6f (ratio %.6f)\n", doubled.distortion,
              doubled.distortion / q4.distortion);
  return 0;
}
