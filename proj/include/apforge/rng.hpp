#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace apf {

/// Counter-free splitmix64 generator. std::mt19937 would also be portable,
/// but the standard distributions are not, and bitwise reproducibility of
/// every experiment hinges on the exact draw sequence.
struct Rng {
  std::uint64_t state;

  explicit Rng(std::uint64_t seed) : state(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform f32 in [0,1).
  float uniform() {
    return static_cast<float>(next() >> 40) * (1.0f / 16777216.0f);
  }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased-enough integer in [0,n) via 64-bit multiply-shift.
  std::uint32_t below(std::uint32_t n) {
    return static_cast<std::uint32_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  /// One Box-Muller draw; the paired value is discarded so each call
  /// consumes exactly two uniforms.
  float normal() {
    float u1 = uniform();
    float u2 = uniform();
    if (u1 < 1e-12f) u1 = 1e-12f;
    return std::sqrt(-2.0f * std::log(u1)) * std::cos(6.28318530717958647692f * u2);
  }

  /// Independent stream keyed off this one. Used to give every
  /// (sample, epoch, purpose) its own deterministic sequence.
  Rng derive(std::uint64_t key) const {
    std::uint64_t z = state ^ (key + 0x9E3779B97F4A7C15ull + (state << 6) + (state >> 2));
    z = (z ^ (z >> 33)) * 0xFF51AFD7ED558CCDull;
    z = (z ^ (z >> 33)) * 0xC4CEB9FE1A85EC53ull;
    return Rng(z ^ (z >> 33));
  }

  /// In-place Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(static_cast<std::uint32_t>(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::vector<int> permutation(int n) {
    std::vector<int> p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
    shuffle(p);
    return p;
  }
};

}  // namespace apf
