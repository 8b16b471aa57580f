#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace mkfa {

/// Counter-based generator: output i of stream s is a pure function of
/// (seed, s, i), so substreams can be drawn in any order or on any thread.
class SeededRng {
 public:
  explicit SeededRng(uint64_t seed = 0, uint64_t stream = 0)
      : seed_(seed), key_(mix(seed ^ mix(stream + 0x632be59bd9b4e019ULL))) {}

  uint64_t seed() const { return seed_; }

  /// Independent substream, e.g. per sample index.
  SeededRng split(uint64_t index) const {
    SeededRng child(seed_, 0);
    child.key_ = mix(key_ ^ mix(index * 0xd1342543de82ef95ULL + 0x9e3779b97f4a7c15ULL));
    return child;
  }

  uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  double normal() {
    // Box-Muller; one draw per pair keeps the stream position predictable.
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Normal truncated to [-2 std, 2 std] by rejection.
  double truncated_normal(double stddev) {
    for (;;) {
      const double z = normal();
      if (z >= -2.0 && z <= 2.0) return z * stddev;
    }
  }

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t seed_;
  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace mkfa
