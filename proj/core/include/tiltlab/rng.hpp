#pragma once

#include <cmath>
#include <cstdint>

namespace tiltlab {

// Counter-based generator: every draw is a pure function of (key, counter),
// so sweep cells seeded per (experiment seed, cell index) are independent of
// execution order and thread count. The mixer is SplitMix64's finalizer.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1)))), counter_(0) {}

  // Derives an independent generator for a named substream.
  CounterRng derive(std::uint64_t stream) const {
    CounterRng child(key_, stream ^ 0xd1342543de82ef95ULL);
    return child;
  }

  std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  bool coin() { return (next_u64() & 1ULL) != 0; }

  // Standard exponential via inverse CDF (uniform() < 1 always).
  double exponential() { return -std::log1p(-uniform()); }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace tiltlab
