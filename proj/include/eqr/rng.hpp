#pragma once

#include <cstdint>

namespace eqr {

// Deterministic, platform-independent RNG. splitmix64 core; no libstdc++
// distributions so streams are bit-stable across compilers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  float uniform(float lo, float hi) {
    return lo + static_cast<float>(next_double()) * (hi - lo);
  }

  // Standard normal via Box-Muller (cosine branch only).
  float normal();

  // Unbiased draw in [0, n) by rejection.
  std::uint64_t next_below(std::uint64_t n);

 private:
  std::uint64_t state_;
};

// Stream derivation: hash-combines a base seed with stream indices so that
// per-item generators are independent of iteration order.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c);

}  // namespace eqr
