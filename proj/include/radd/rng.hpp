#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace radd {

using Rng = std::mt19937_64;

// Mixes a base seed with a sequence of stream coordinates (epoch, batch,
// element, purpose, ...) so that every consumer gets an independent stream
// that does not depend on how work is split across threads.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> coords) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(base);
  for (std::uint64_t c : coords) h = mix(h ^ mix(c));
  return h;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> coords) {
  return Rng(derive_seed(base, coords));
}

}  // namespace radd
