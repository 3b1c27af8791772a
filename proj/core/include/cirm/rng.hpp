#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "cirm/error.hpp"

namespace cirm {

// Self-contained RNG (splitmix64 seeding + xoshiro256**) so that every draw
// is reproducible across platforms and standard-library versions. std::mt19937
// is portable but std::uniform_*_distribution / normal_distribution are not;
// avoiding <random> distributions keeps artifacts byte-stable everywhere.
struct SplitMix64 {
  uint64_t state;

  explicit SplitMix64(uint64_t seed) : state(seed) {}

  uint64_t next() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
};

// Derives an independent stream seed from a base seed and a stream id.
// Used to give every pipeline stage / corpus pair its own stream so that
// changing one consumer's draw count never shifts another's.
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
  SplitMix64 sm(base ^ (0x6a09e667f3bcc909ull + stream * 0x9e3779b97f4a7c15ull));
  sm.next();
  return sm.next();
}

class Rng {
public:
  explicit Rng(uint64_t seed) {
    SplitMix64 sm(seed);
    for (auto& w : s_) w = sm.next();
    has_spare_ = false;
    spare_ = 0.0;
  }

  uint64_t next_u64() {
    uint64_t result = rotl(s_[1] * 5, 7) * 9;
    uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53 random bits.
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double a, double b) { return a + (b - a) * uniform01(); }

  // Uniform in [0, n), rejection sampling to avoid modulo bias.
  uint64_t below(uint64_t n) {
    if (n == 0) throw Error("bad_argument", "Rng::below requires n > 0");
    uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Uniform integer in [lo, hi] inclusive.
  int64_t range(int64_t lo, int64_t hi) {
    if (lo > hi) throw Error("bad_argument", "Rng::range requires lo <= hi");
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo) + 1));
  }

  bool coin(double p) { return uniform01() < p; }

  // Standard normal via Box-Muller, spare value cached for the next call.
  double gauss() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] so log is finite.
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform01();
    double m = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = m * std::sin(a);
    has_spare_ = true;
    return m * std::cos(a);
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t s_[4];
  bool has_spare_;
  double spare_;
};

}  // namespace cirm
