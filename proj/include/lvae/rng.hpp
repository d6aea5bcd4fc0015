#pragma once

// Seed policy: one root seed per run. Every consumer draws from a child
// stream whose seed is a SplitMix64 hash of (root, stream, index), so any
// component can be re-run in isolation with the same numbers.

#include <cstdint>
#include <random>

namespace lvae {

using Rng = std::mt19937_64;

enum class Stream : std::uint64_t {
  init = 1,
  batches = 2,
  noise = 3,
  metrics = 4,
  split = 5,
  data = 6,
  validation = 7,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream, std::uint64_t index = 0) {
  return splitmix64(splitmix64(splitmix64(root) ^ stream) + index);
}

inline std::uint64_t derive_seed(std::uint64_t root, Stream stream, std::uint64_t index = 0) {
  return derive_seed(root, static_cast<std::uint64_t>(stream), index);
}

inline Rng make_rng(std::uint64_t root, Stream stream, std::uint64_t index = 0) {
  return Rng(derive_seed(root, stream, index));
}

}  // namespace lvae
