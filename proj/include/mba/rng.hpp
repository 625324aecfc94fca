#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mba {

/// 64-bit FNV-1a.
std::uint64_t hash_string(std::string_view s);

/// Derives an independent stream seed from a parent seed and a tag.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

/// Deterministic generator. Distributions are computed here rather than with
/// <random> distributions so streams do not depend on the standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Normal with the given std, resampled outside two standard deviations.
  double truncated_normal(double stddev);
  /// Rayleigh with scale sigma.
  double rayleigh(double sigma);
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mba
