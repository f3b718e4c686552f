#pragma once

#include "snpe/common.hpp"

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace snpe {

using Rng = std::mt19937_64;

//! SplitMix64 finaliser; good avalanche for deriving independent streams.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

//! Derive a child seed from a parent seed and a path of integer tags.
//! Used so that per-draw streams do not depend on scheduling order.
inline std::uint64_t derive_seed(std::uint64_t parent,
                                 std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(parent);
  for (auto p : path)
    s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

// Distribution helpers implemented directly rather than through
// std::normal_distribution so sample streams are identical across standard
// libraries.

inline double uniform01(Rng& rng) {
  // 53 random bits -> [0, 1)
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_open01(Rng& rng) {
  double u;
  do {
    u = uniform01(rng);
  } while (u == 0.0);
  return u;
}

inline double standard_normal(Rng& rng) {
  // Box-Muller, one value per call; simple and reproducible.
  const double u1 = uniform_open01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline Vec standard_normal_vec(Rng& rng, Index n) {
  Vec v(n);
  for (Index i = 0; i < n; ++i)
    v[i] = standard_normal(rng);
  return v;
}

inline Mat standard_normal_mat(Rng& rng, Index rows, Index cols) {
  Mat m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i)
      m(i, j) = standard_normal(rng);
  return m;
}

//! Index drawn with probability proportional to `weights` (non-negative).
inline Index categorical(Rng& rng, const Vec& weights) {
  const double total = weights.sum();
  double u = uniform01(rng) * total;
  for (Index k = 0; k < weights.size(); ++k) {
    u -= weights[k];
    if (u < 0.0)
      return k;
  }
  for (Index k = weights.size() - 1; k >= 0; --k)
    if (weights[k] > 0.0)
      return k;
  return weights.size() - 1;
}

} // namespace snpe
