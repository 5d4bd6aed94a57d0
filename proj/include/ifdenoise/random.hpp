#pragma once

#include <cstdint>
#include <random>

namespace ifdenoise {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream for (seed, stream). Streams never overlap, so adding
// iterations or repeats leaves the earlier ones untouched.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  return Rng(derive_seed(seed, stream));
}

// Named streams used across the library.
namespace stream {
inline constexpr std::uint64_t kPositives = 1;
inline constexpr std::uint64_t kNegatives = 2;
inline constexpr std::uint64_t kNoise = 3;
inline constexpr std::uint64_t kPartition = 4;
inline constexpr std::uint64_t kInit = 5;
inline constexpr std::uint64_t kLissa = 6;
inline constexpr std::uint64_t kTestSet = 7;
inline constexpr std::uint64_t kOracle = 8;
inline constexpr std::uint64_t kIteration = 1000;  // + iteration index
}  // namespace stream

}  // namespace ifdenoise
