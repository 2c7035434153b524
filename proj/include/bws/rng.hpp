#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "bws/common.hpp"

namespace bws {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}
}  // namespace detail

// Seedable deterministic generator. Identical seed gives an identical sample
// stream; fork() derives independent, reproducible sub-streams so parallel
// workers stay deterministic regardless of scheduling.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(detail::splitmix64(seed)) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, bound).
  std::uint64_t integer(std::uint64_t bound) {
    if (bound == 0) throw ContractError("Rng::integer: bound must be positive");
    return gen_() % bound;
  }

  // Standard normal via Box-Muller; the library distribution is avoided so the
  // stream is identical across standard library implementations.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Independent stream derived from this generator's seed and a salt.
  Rng fork(std::uint64_t salt) const {
    return Rng(detail::splitmix64(detail::splitmix64(seed_) + salt));
  }

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    return detail::splitmix64(a * 0x9E3779B97F4A7C15ull + b);
  }

  // FNV-1a over a tag string, for naming sub-streams.
  static std::uint64_t tag(const char* s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (; *s; ++s) h = (h ^ static_cast<unsigned char>(*s)) * 0x100000001B3ull;
    return h;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace bws
