#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace p300 {

// Deterministic, platform-independent generator (xoshiro256++ seeded via
// splitmix64). std::mt19937 would do, but the distributions in <random>
// are implementation-defined and would break cross-toolchain byte-exact
// reports.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, n). Lemire multiply-shift; bias is < 2^-64.
  uint64_t below(uint64_t n) {
    return uint64_t((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = size_t(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t state_[4];
};

// Stable sub-seed derivation: every component draws from its own stream so
// experiments stay reproducible regardless of execution order.
inline uint64_t derive_seed(uint64_t root, std::string_view tag, uint64_t a = 0,
                            uint64_t b = 0) {
  uint64_t h = root ^ 0x51'7c'c1'b7'27'22'0a'95ULL;
  for (const char c : tag) {
    h ^= uint64_t(uint8_t(c));
    h *= 0x100000001b3ULL;
  }
  uint64_t x = h;
  Rng::splitmix64(x);
  x ^= a * 0x9e3779b97f4a7c15ULL;
  Rng::splitmix64(x);
  x ^= b * 0xc2b2ae3d27d4eb4fULL;
  return Rng::splitmix64(x);
}

}  // namespace p300
