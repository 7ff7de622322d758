#pragma once

#include <cstdint>
#include <random>

namespace ftree::detail {

/// Uniform stream on the open interval (0, 1), reproducible across standard
/// library implementations (std::uniform_real_distribution is not).
class UniformStream {
 public:
  explicit UniformStream(std::uint64_t seed) : engine_(seed) {}

  double operator()() {
    // 53 random mantissa bits, shifted by half an ulp so 0 is never produced.
    const std::uint64_t bits = engine_() >> 11;
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

 private:
  std::mt19937_64 engine_;
};

/// Mixes a base seed with a stream index so sub-streams are decorrelated.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace ftree::detail
