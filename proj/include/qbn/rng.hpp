#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>

namespace qbn {

// SplitMix64 evaluated in counter mode: the n-th draw of a stream with key K
// is mix64(K + n * 0x9E3779B97F4A7C15). Any draw can be computed directly from
// (key, counter), which makes per-example streams independent of generation
// order. Uniform and normal transforms are implemented here rather than
// through <random> distributions so results are identical across standard
// libraries.
class CounterRng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit CounterRng(std::uint64_t key, std::uint64_t counter = 0)
      : key_(key), counter_(counter) {}

  static constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Key of an independent child stream, e.g. one per example index.
  static constexpr std::uint64_t derive(std::uint64_t key,
                                        std::uint64_t stream) {
    return mix64(key ^ mix64(stream + kGamma));
  }

  CounterRng fork(std::uint64_t stream) const {
    return CounterRng(derive(key_, stream));
  }

  std::uint64_t next_u64() { return mix64(key_ + (++counter_) * kGamma); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n));
  }

  // Standard normal via Box-Muller; consumes two draws per call.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace qbn
