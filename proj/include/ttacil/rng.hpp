#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>

namespace ttacil {

/// SplitMix64 finaliser.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Order-sensitive combination of several keys into one seed.
constexpr std::uint64_t derive_seed(std::initializer_list<std::uint64_t> keys) noexcept {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (auto k : keys) h = mix64(h ^ mix64(k));
  return h;
}

/// FNV-1a over raw bytes.
inline std::uint64_t fnv1a(std::span<const unsigned char> bytes,
                           std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Stream tags so that independent consumers of one run seed never share a stream.
namespace seed_tag {
inline constexpr std::uint64_t kEncoderInit = 1;
inline constexpr std::uint64_t kPhase1 = 2;
inline constexpr std::uint64_t kTta = 3;
inline constexpr std::uint64_t kEvalOrder = 4;
inline constexpr std::uint64_t kFinetune = 5;
}  // namespace seed_tag

}  // namespace ttacil
