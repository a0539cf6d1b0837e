#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ttacil/params.hpp"

namespace ttacil {

/// Central-difference gradient (f(p+ε) − f(p−ε)) / 2ε for each coordinate of the
/// named parameters. `f` is evaluated on the store as perturbed in place; every
/// coordinate is restored bit for bit before moving on.
inline GradientMap finite_diff_gradient(const std::function<double(const ParameterStore&)>& f,
                                        ParameterStore& store,
                                        const std::vector<std::string>& names, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_diff_gradient: epsilon must be > 0");
  GradientMap out;
  for (const auto& name : names) {
    Tensor g(store.get(name).shape(), 0.0);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      double& slot = store.get_mut(name)[i];
      const double orig = slot;
      slot = orig + epsilon;
      const double fp = f(store);
      slot = orig - epsilon;
      const double fm = f(store);
      slot = orig;
      g[i] = (fp - fm) / (2.0 * epsilon);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

/// Relative error |a − b| / max(|a|, |b|, floor). The floor keeps coordinates whose
/// true gradient is ~0 from being judged on finite-difference round-off alone.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_error(const GradientMap& a, const GradientMap& b, double floor = 1e-6) {
  double worst = 0.0;
  for (const auto& [name, ta] : a) {
    auto it = b.find(name);
    if (it == b.end()) throw std::invalid_argument("gradient maps differ: missing '" + name + "'");
    const Tensor& tb = it->second;
    if (ta.shape() != tb.shape()) throw ShapeError("gradient shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < ta.numel(); ++i) worst = std::max(worst, relative_error(ta[i], tb[i], floor));
  }
  return worst;
}

}  // namespace ttacil
