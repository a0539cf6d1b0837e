#pragma once

// Noise corruptions at five severity levels (Gaussian, shot, impulse).

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "ttacil/rng.hpp"
#include "ttacil/tensor.hpp"

namespace ttacil {

enum class CorruptionKind { Gaussian, Shot, Impulse };

inline CorruptionKind corruption_kind_from_string(std::string_view s) {
  if (s == "gaussian") return CorruptionKind::Gaussian;
  if (s == "shot") return CorruptionKind::Shot;
  if (s == "impulse") return CorruptionKind::Impulse;
  throw std::invalid_argument("unknown corruption kind '" + std::string(s) + "'");
}

inline std::string_view to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::Gaussian: return "gaussian";
    case CorruptionKind::Shot: return "shot";
    case CorruptionKind::Impulse: return "impulse";
  }
  return "?";
}

// Common-corruptions constants, indexed by severity − 1.
inline constexpr std::array<double, 5> kGaussianSigma{0.08, 0.12, 0.18, 0.26, 0.38};
inline constexpr std::array<double, 5> kShotRate{60, 25, 12, 5, 3};
inline constexpr std::array<double, 5> kImpulseFraction{0.03, 0.06, 0.09, 0.17, 0.27};

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::Gaussian;
  int severity = 3;
  std::uint64_t seed = 0;
  /// Replaces the table value (σ, λ or ρ) when set.
  std::optional<double> strength;

  double level() const {
    if (strength) return *strength;
    if (severity < 1 || severity > 5) {
      throw std::invalid_argument("corruption severity must be in 1..5, got " + std::to_string(severity));
    }
    const auto i = static_cast<std::size_t>(severity - 1);
    switch (kind) {
      case CorruptionKind::Gaussian: return kGaussianSigma[i];
      case CorruptionKind::Shot: return kShotRate[i];
      case CorruptionKind::Impulse: return kImpulseFraction[i];
    }
    return 0.0;
  }
};

/// Pure function of (image, spec): the noise stream is seeded from the spec seed and
/// the image bytes. Output is clamped to [0,1].
inline Tensor apply_corruption(const Tensor& image, const CorruptionSpec& spec) {
  const double lvl = spec.level();
  const auto bytes = std::as_bytes(image.data());
  const std::uint64_t h =
      fnv1a({reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()});
  std::mt19937_64 rng(derive_seed({spec.seed, h, static_cast<std::uint64_t>(spec.kind)}));
  Tensor out = image;
  switch (spec.kind) {
    case CorruptionKind::Gaussian: {
      if (lvl < 0.0) throw std::invalid_argument("gaussian sigma must be >= 0");
      if (lvl == 0.0) break;
      std::normal_distribution<double> n(0.0, lvl);
      for (auto& v : out.data()) v = std::clamp(v + n(rng), 0.0, 1.0);
      break;
    }
    case CorruptionKind::Shot: {
      if (!(lvl > 0.0)) throw std::invalid_argument("shot-noise rate must be > 0");
      for (auto& v : out.data()) {
        std::poisson_distribution<long> p(std::max(v, 0.0) * lvl);
        v = std::clamp(static_cast<double>(v > 0.0 ? p(rng) : 0) / lvl, 0.0, 1.0);
      }
      break;
    }
    case CorruptionKind::Impulse: {
      if (lvl < 0.0 || lvl > 1.0) throw std::invalid_argument("impulse fraction must be in [0,1]");
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (auto& v : out.data()) {
        const double hit = u(rng);
        const double salt = u(rng);
        if (hit < lvl) v = salt < 0.5 ? 0.0 : 1.0;
      }
      break;
    }
  }
  return out;
}

}  // namespace ttacil
