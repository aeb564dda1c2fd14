#pragma once

#include <cstdint>
#include <random>

#include "cbre/autodiff.hpp"

namespace cbre {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; derives independent stream seeds from a master seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Tensor standard_normal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor out(rows, cols);
  for (Index i = 0; i < out.size(); ++i) out.data()[i] = dist(rng);
  return out;
}

inline Tensor uniform01(Index rows, Index cols, Rng& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Tensor out(rows, cols);
  for (Index i = 0; i < out.size(); ++i) out.data()[i] = dist(rng);
  return out;
}

}  // namespace cbre
