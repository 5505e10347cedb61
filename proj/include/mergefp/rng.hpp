#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace mergefp {

// Deterministic PRNG (splitmix64). Identical sequences on every platform,
// independent of the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed + 0x9e3779b97f4a7c15ull) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0,1)
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  float next_float() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

  // uniform integer in [0,n)
  uint64_t below(uint64_t n) {
    // rejection sampling to avoid modulo bias
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // standard normal via Box-Muller
  float normal() {
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 1e-300) u1 = next_double();
    return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) *
                              std::cos(2.0 * 3.14159265358979323846 * u2));
  }

 private:
  uint64_t state_;
};

// Stable seed derivation: hash the tag (FNV-1a) and mix with the master seed.
// Used everywhere a stage/sample needs its own stream so that parallel and
// serial execution agree.
inline uint64_t derive_seed(uint64_t master, std::string_view tag) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (char c : tag) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ull;
  }
  Rng mix(master ^ h);
  return mix.next_u64();
}

inline uint64_t derive_seed(uint64_t master, uint64_t index) {
  Rng mix(master ^ (index * 0xff51afd7ed558ccdull + 0x2545f4914f6cdd1dull));
  return mix.next_u64();
}

}  // namespace mergefp
