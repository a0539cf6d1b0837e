#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ttacil/ttacil.hpp"

namespace ttacil::test {

inline Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

/// A model small enough for coordinate-wise finite differences.
inline EncoderConfig tiny_encoder_config() {
  EncoderConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = 2;
  c.heads = 2;
  c.mlp_ratio = 2.0;
  c.adapter.hidden_dim = 2;
  return c;
}

/// Perturbs every tensor so that no gradient vanishes by symmetry (W_up = 0, γ = 1, β = 0).
inline void jitter_all(ParameterStore& store, std::uint64_t seed, double amount = 0.1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amount, amount);
  for (auto& e : store.entries_mut()) {
    for (auto& v : e.value.data()) v += u(rng);
  }
}

inline std::vector<Sample> random_images(std::size_t n, std::size_t size, std::uint64_t seed,
                                         std::uint64_t first_id = 0) {
  std::mt19937_64 rng(seed);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({random_tensor(Shape{size, size, 1}, rng, 0.0, 1.0), static_cast<ClassId>(i % 2),
                   first_id + i});
  }
  return out;
}

using LossBuilder = std::function<ag::Var(ParamBinding&)>;

struct GradCheck {
  GradientMap analytic;
  GradientMap numeric;
  double max_rel_error = 0.0;
};

/// Compares backward() against central differences for `names` of `store`.
inline GradCheck check_gradients(ParameterStore& store, const std::vector<std::string>& names,
                                 const LossBuilder& loss, double eps = 1e-5) {
  GradCheck out;
  {
    ag::Tape tape;
    ParamBinding bind(tape, store, names);
    ag::Var l = loss(bind);
    tape.backward(l);
    out.analytic = bind.gradients();
  }
  auto f = [&loss](const ParameterStore& s) {
    ag::Tape tape;
    ParamBinding bind(tape, s, {});
    return loss(bind).value().item();
  };
  out.numeric = finite_diff_gradient(f, store, names, eps);
  out.max_rel_error = max_relative_error(out.analytic, out.numeric);
  return out;
}

}  // namespace ttacil::test
