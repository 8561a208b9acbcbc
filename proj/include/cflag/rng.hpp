#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

#include "common.hpp"

namespace cflag {

// Tags separating the independent deterministic streams derived from one
// experiment seed.
enum StreamTag : std::uint64_t {
  kStreamLocal = 0x11,      // per-round component sampling at a client
  kStreamMemory = 0x22,     // replay-buffer reservoir draws
  kStreamSplit = 0x33,        // held-out split selection
  kStreamPartition = 0x44,    // Dirichlet partitioning
  kStreamGen = 0x55,          // synthetic data generation
  kStreamMemoryBatch = 0x66,  // optional per-round memory mini-batches
};

class Rng;
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> key);

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// xoshiro256** keyed by an arbitrary tuple of integers. Every distribution is
// hand-rolled so a stream is a pure function of its key, independent of the
// standard library implementation; this is what makes traces byte-identical
// across platforms and worker counts.
class Rng {
 public:
  explicit Rng(std::initializer_list<std::uint64_t> key) {
    std::uint64_t h = 0x243f6a8885a308d3ULL;
    for (std::uint64_t k : key) {
      h ^= k + 0x9e3779b97f4a7c15ULL + (h << 12) + (h >> 4);
      std::uint64_t t = h;
      h = splitmix64(t);
    }
    for (auto& w : s_) w = splitmix64(h);
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // [0, 1)
  double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

  // (0, 1), never exactly 0 or 1; safe under log()
  double uniform_open() { return ((next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  // Unbiased integer in [0, n) (Lemire multiply-shift with rejection).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ConfigError("Rng::below called with n = 0");
    unsigned __int128 m = (unsigned __int128)next_u64() * n;
    auto lo = (std::uint64_t)m;
    if (lo < n) {
      std::uint64_t t = (0 - n) % n;
      while (lo < t) {
        m = (unsigned __int128)next_u64() * n;
        lo = (std::uint64_t)m;
      }
    }
    return (std::uint64_t)(m >> 64);
  }

  double normal() {
    // Box-Muller, cosine branch only; one value per two uniforms keeps the
    // stream consumption fixed.
    constexpr double two_pi = 6.28318530717958647692;
    double u1 = uniform_open();
    double u2 = uniform_open();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  // Marsaglia-Tsang; shape < 1 boosted through gamma(shape + 1).
  double gamma(double shape) {
    if (!(shape > 0.0)) throw ConfigError("gamma shape must be positive");
    if (shape < 1.0) {
      double u = uniform_open();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      double u = uniform_open();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  Vec dirichlet(double concentration, int n) {
    Vec out(n);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      out[i] = gamma(concentration);
      sum += out[i];
    }
    if (!(sum > 0.0)) {
      for (int i = 0; i < n; ++i) out[i] = 1.0 / n;
      return out;
    }
    for (int i = 0; i < n; ++i) out[i] /= sum;
    return out;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t s_[4];
};

// One key-derived 64-bit value, for seeding nested components.
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> key) {
  return Rng(key).next_u64();
}

}  // namespace cflag
