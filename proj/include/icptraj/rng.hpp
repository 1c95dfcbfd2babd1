#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace icptraj {

/// Deterministic SplitMix64 generator with helper draws.
///
/// All randomness in the project flows through this class instead of
/// <random> distributions, whose output is implementation-defined; the
/// reproducibility contract requires byte-identical reruns.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double next_unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_unit();
  }

  /// Unbiased uniform index in [0, n); n must be >= 1.
  std::size_t next_index(std::size_t n) {
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t rem = (0 - un) % un;  // 2^64 mod n
    std::uint64_t x = next_u64();
    if (rem != 0) {
      const std::uint64_t limit = 0 - rem;  // largest multiple of n
      while (x >= limit) x = next_u64();
    }
    return static_cast<std::size_t>(x % un);
  }

  bool next_bernoulli(double p) { return next_unit() < p; }

  /// Standard normal via Box-Muller; one draw consumes two uniforms.
  double next_gaussian() {
    const double u1 = 1.0 - next_unit();  // (0, 1], keeps log finite
    const double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

 private:
  std::uint64_t state_;
};

namespace detail {
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}
}  // namespace detail

/// Derives an independent named stream from one master seed.
inline Rng derive_stream(std::uint64_t seed, std::string_view name) {
  return Rng(detail::mix64(detail::mix64(seed) ^ detail::fnv1a(name)));
}

/// Named stream with an index (per sample, per step, ...).
inline Rng derive_stream(std::uint64_t seed, std::string_view name,
                         std::uint64_t index) {
  return Rng(detail::mix64(detail::mix64(seed) ^ detail::fnv1a(name)) +
             0x9e3779b97f4a7c15ull * (index + 1));
}

}  // namespace icptraj
