#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "ttacil/params.hpp"

namespace ttacil {

/// Cosine annealing from base_lr to 0 over total_steps; constant when disabled.
struct LrSchedule {
  bool cosine = false;
  std::size_t total_steps = 0;

  double at(double base_lr, std::size_t step) const {
    if (!cosine || total_steps == 0) return base_lr;
    const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac));
  }
};

/// SGD-with-momentum state over a fixed set of trainable parameters.
class OptimizerState {
 public:
  OptimizerState(const ParameterStore& store, const std::vector<std::string>& trainable,
                 double base_lr, double momentum, LrSchedule schedule = {})
      : base_lr_(base_lr), momentum_(momentum), schedule_(schedule) {
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw std::invalid_argument("momentum must lie in [0, 1), got " + std::to_string(momentum));
    }
    if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) {
      throw std::invalid_argument("learning rate must be finite and non-negative");
    }
    for (const auto& name : trainable) velocity_.emplace(name, Tensor(store.get(name).shape(), 0.0));
  }

  double lr(std::size_t step) const { return schedule_.at(base_lr_, step); }
  double momentum() const noexcept { return momentum_; }
  double base_lr() const noexcept { return base_lr_; }
  const GradientMap& velocity() const noexcept { return velocity_; }
  GradientMap& velocity_mut() noexcept { return velocity_; }

 private:
  double base_lr_;
  double momentum_;
  LrSchedule schedule_;
  GradientMap velocity_;
};

/// v ← μ·v + g ; p ← p − lr(step)·v, for exactly the state's trainable set.
inline void sgd_step(ParameterStore& store, const GradientMap& grads, OptimizerState& state,
                     std::size_t step) {
  auto& vel = state.velocity_mut();
  if (grads.size() != vel.size()) {
    throw std::invalid_argument("sgd_step: " + std::to_string(grads.size()) +
                                " gradients for " + std::to_string(vel.size()) +
                                " trainable parameters");
  }
  const double lr = state.lr(step);
  const double mu = state.momentum();
  for (auto& [name, v] : vel) {
    auto it = grads.find(name);
    if (it == grads.end()) throw std::invalid_argument("sgd_step: missing gradient for '" + name + "'");
    Tensor& p = store.get_mut(name);
    const Tensor& g = it->second;
    if (g.shape() != p.shape() || v.shape() != p.shape()) {
      throw ShapeError("sgd_step: shape mismatch for '" + name + "': param " +
                       shape_str(p.shape()) + ", grad " + shape_str(g.shape()) + ", velocity " +
                       shape_str(v.shape()));
    }
    for (std::size_t i = 0; i < p.numel(); ++i) v[i] = mu * v[i] + g[i];
    if (lr == 0.0) continue;
    for (std::size_t i = 0; i < p.numel(); ++i) p[i] -= lr * v[i];
  }
}

}  // namespace ttacil
