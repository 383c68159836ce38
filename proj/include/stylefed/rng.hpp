#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace stylefed {

using Rng = std::mt19937_64;

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a path of tags
/// (e.g. {client id, round}).
constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(base);
  for (auto v : path) s = mix64(s ^ mix64(v + 0x632be59bd9b4e019ULL));
  return s;
}

// Stream tags so that different consumers of the global seed never collide.
enum class Stream : std::uint64_t {
  kData = 1,
  kPartition = 2,
  kStyle = 3,
  kInit = 4,
  kSampling = 5,
  kClient = 6,
  kServer = 7,
  kSplit = 8,
};

inline Rng make_rng(std::uint64_t seed, Stream stream, std::initializer_list<std::uint64_t> path = {}) {
  std::uint64_t s = derive_seed(seed, {static_cast<std::uint64_t>(stream)});
  for (auto v : path) s = derive_seed(s, {v});
  return Rng(s);
}

}  // namespace stylefed
