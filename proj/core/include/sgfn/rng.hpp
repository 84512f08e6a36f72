#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace sgfn {

using Rng = std::mt19937_64;

/// Stream seed derived from (global seed, label) with FNV-1a + splitmix64.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view label, std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t global_seed, std::string_view label, std::uint64_t index = 0) {
  return Rng(derive_seed(global_seed, label, index));
}

/// Uniform double in [0, 1).
double uniform01(Rng& rng);

/// Index drawn with probability proportional to weights (all >= 0, sum > 0).
std::size_t sample_categorical(std::span<const double> weights, Rng& rng);

}  // namespace sgfn
