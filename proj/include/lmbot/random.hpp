#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace lmbot {

using Rng = std::mt19937_64;

// FNV-1a over the tag, mixed with master seed and index through splitmix64.
// Every stochastic stage draws from its own derived stream so that a stage
// can be re-run (e.g. on resume) without replaying earlier stages.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index = 0) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t x = master ^ (h + 0x9E3779B97F4A7C15ULL * (index + 1));
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

inline Rng make_rng(std::uint64_t master, std::string_view tag, std::uint64_t index = 0) {
  return Rng(derive_seed(master, tag, index));
}

}  // namespace lmbot
