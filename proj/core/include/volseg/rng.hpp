#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace volseg {

// Seedable random source with fully pinned-down transforms. std::mt19937 is
// specified bit-for-bit by the standard; the standard distributions are not,
// so the uniform/normal/integer mappings are spelled out here. Results are
// therefore reproducible across compilers and standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

  uint32_t next_u32() { return engine_(); }

  /// Uniform in [lo, hi), 24-bit mantissa resolution.
  float uniform(float lo, float hi) {
    const float u = static_cast<float>(next_u32() >> 8) * (1.0f / 16777216.0f);
    return lo + (hi - lo) * u;
  }

  /// Uniform in [0, n) without modulo bias (rejection sampling).
  uint32_t uniform_index(uint32_t n) {
    const uint32_t limit = UINT32_MAX - UINT32_MAX % n;
    uint32_t x;
    do {
      x = next_u32();
    } while (x >= limit);
    return x % n;
  }

  /// Gaussian sample via the Box-Muller transform; pairs are drawn lazily
  /// and the second sample is cached.
  float normal(float mean, float stddev) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    // u1 in (0, 1] so the log is finite; u2 in [0, 1).
    const double u1 = (static_cast<double>(next_u32()) + 1.0) / 4294967296.0;
    const double u2 = static_cast<double>(next_u32()) / 4294967296.0;
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = static_cast<float>(radius * std::sin(angle));
    have_spare_ = true;
    return mean + stddev * static_cast<float>(radius * std::cos(angle));
  }

 private:
  std::mt19937 engine_;
  float spare_ = 0.0f;
  bool have_spare_ = false;
};

/// Derive an independent stream seed (splitmix64 finalizer). Used to give
/// each epoch / dataset item its own stream so resuming mid-run replays the
/// exact same draws.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace volseg
