#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

namespace inca {

using Rng = std::mt19937_64;

// Stateless seed derivation so independent streams (per sample, per layer,
// per slot, per epoch) never depend on how many other streams exist.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(base);
  for (auto t : tags) h = mix(h ^ mix(t));
  return h;
}

template <typename T>
void fill_normal(std::span<T> out, Rng& rng, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  for (auto& v : out) v = static_cast<T>(n(rng));
}

}  // namespace inca
