#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace wm {

// Deterministic random source. All sampling goes through hand-rolled
// transforms of the raw mt19937 stream so that a given seed produces the
// same values on every platform (std::*_distribution is
// implementation-defined).
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

  // Uniform in [0, 1).
  double uniform() { return gen_() * (1.0 / 4294967296.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  uint32_t uniform_int(uint32_t n) {
    return static_cast<uint32_t>((static_cast<uint64_t>(gen_()) * n) >> 32);
  }

  // Fair bit.
  int bit() { return (gen_() >> 15) & 1; }

  // Standard normal via Box-Muller, second value cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = (gen_() + 0.5) * (1.0 / 4294967296.0);
    double u2 = gen_() * (1.0 / 4294967296.0);
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

 private:
  std::mt19937 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace wm
