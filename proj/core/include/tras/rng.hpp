#pragma once

#include <cstdint>
#include <random>

namespace tras {

// splitmix64 finalizer; used to derive independent seed streams from a run
// seed plus structural coordinates (epoch, step, index, ...).
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
  std::uint64_t h = mix_seed(a ^ (b * 0xff51afd7ed558ccdULL + 0x2545f4914f6cdd1dULL));
  if constexpr (sizeof...(rest) == 0) {
    return h;
  } else {
    return mix_seed(h, rest...);
  }
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

inline double draw_normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  std::normal_distribution<double> dist(mean, stddev);
  return dist(rng);
}

inline double draw_uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  return dist(rng);
}

}  // namespace tras
