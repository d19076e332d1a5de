#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace udaseg {

/// Counter-based generator: the n-th draw of stream `key` is a pure function
/// of (key, n), so datasets do not depend on the standard library's
/// distribution implementations. Output stream is pinned at version 1.
class CounterRng {
 public:
  static constexpr int kVersion = 1;

  explicit CounterRng(uint64_t key) : key_(mix(key ^ 0x9E3779B97F4A7C15ULL)) {}
  CounterRng(uint64_t seed, uint64_t stream) : CounterRng(mix(seed) ^ mix(stream + 0x632BE59BD9B4E019ULL)) {}

  uint64_t next_u64() { return mix(key_ + 0xD1B54A32D192ED03ULL * ++counter_); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  double normal(double mean, double sd) { return mean + sd * normal(); }

  /// Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  uint64_t counter() const { return counter_; }
  uint64_t key() const { return key_; }
  void set_state(uint64_t key, uint64_t counter) {
    key_ = key;
    counter_ = counter;
  }

 private:
  // SplitMix64 finalizer.
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace udaseg
