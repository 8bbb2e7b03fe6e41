#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace stressvit {

// Seeded generator shared by every stochastic step of a run. Uniform and
// normal draws are derived from raw 64-bit outputs so results do not depend
// on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = next();
    } while (r >= limit);
    return r % n;
  }

  // Box-Muller; the second variate is discarded to keep the draw order simple.
  double normal() {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925 * u2);
  }

  // Normal with resampling outside +-2 sigma.
  double truncated_normal(double stddev) {
    double z;
    do {
      z = normal();
    } while (std::abs(z) > 2.0);
    return z * stddev;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace stressvit
