#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>
#include <vector>

namespace patchtraj {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Named, indexed sub-stream of a root seed: derive_seed(root, "cv-folds", {roi, fold}).
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::initializer_list<std::int64_t> keys = {}) {
  std::uint64_t h = 0xcbf29ce484222325ULL; // FNV-1a over the stream name
  for (unsigned char c : stream) h = (h ^ c) * 0x100000001b3ULL;
  std::uint64_t s = splitmix64(root ^ splitmix64(h));
  for (auto k : keys) s = splitmix64(s ^ static_cast<std::uint64_t>(k));
  return s;
}

// Unbiased bounded draw, independent of the standard library's distributions.
inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t v;
  do v = rng();
  while (v >= limit);
  return v % n;
}

template <class T> void seeded_shuffle(std::vector<T>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[bounded(rng, i)]);
}

} // namespace patchtraj
