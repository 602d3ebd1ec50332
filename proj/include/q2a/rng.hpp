#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace q2a {

// Seeded RNG wrapper. Index draws use only the standardized mt19937_64
// output stream, so dataset generation is reproducible across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform draw from {0, ..., n-1}; n must be positive.
  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>(gen_() % n);
  }

  bool chance_percent(unsigned p) { return uniform_index(100) < p; }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace q2a
