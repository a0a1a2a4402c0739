#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace specmerge::random {

/// SplitMix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// FNV-1a, used to fold tensor names into the counter key.
constexpr std::uint64_t hash_name(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Stateless pseudorandom function of (key, counter). The same inputs give
/// the same bits on every platform and in any evaluation order.
constexpr std::uint64_t bits(std::uint64_t key, std::uint64_t counter) noexcept {
  return mix64(mix64(key) ^ mix64(counter ^ 0x632be59bd9b4e019ULL));
}

constexpr std::uint64_t derive_key(std::uint64_t seed, std::string_view name) noexcept {
  return mix64(seed ^ mix64(hash_name(name)));
}

/// Uniform in [0, 1) with 53 random bits.
constexpr double uniform(std::uint64_t key, std::uint64_t counter) noexcept {
  return static_cast<double>(bits(key, counter) >> 11) * 0x1.0p-53;
}

/// Standard normal via Box-Muller on two counter-derived uniforms.
inline double normal(std::uint64_t key, std::uint64_t counter) noexcept {
  const double u1 = 1.0 - uniform(key, 2 * counter);  // (0, 1]
  const double u2 = uniform(key, 2 * counter + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace specmerge::random
