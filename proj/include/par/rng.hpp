#pragma once

#include <cstdint>
#include <random>

namespace par {

using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline std::uint64_t uniform_index(Rng& rng, std::uint64_t lo, std::uint64_t hi_inclusive) {
  return std::uniform_int_distribution<std::uint64_t>(lo, hi_inclusive)(rng);
}

}  // namespace par
