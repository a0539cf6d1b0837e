#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ttacil/tensor.hpp"

namespace ttacil {

using ClassId = int;

struct Prototype {
  Tensor mean;  // [d]
  std::size_t count = 0;
};

/// Mean embedding per class, c_k = (1/N_k) Σ_j [y_j = k] z_j, summed in row order.
/// features: [n×d]; every label must be in `task_classes` and every class needs a sample.
inline std::map<ClassId, Prototype> compute_prototypes(const Tensor& features,
                                                       std::span<const ClassId> labels,
                                                       std::span<const ClassId> task_classes) {
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw ShapeError("compute_prototypes: features " + shape_str(features.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t d = features.dim(1);
  std::map<ClassId, Prototype> out;
  for (ClassId k : task_classes) {
    if (!out.emplace(k, Prototype{Tensor(Shape{d}, 0.0), 0}).second) {
      throw std::invalid_argument("compute_prototypes: duplicate class " + std::to_string(k));
    }
  }
  for (std::size_t j = 0; j < labels.size(); ++j) {
    auto it = out.find(labels[j]);
    if (it == out.end()) {
      throw std::invalid_argument("compute_prototypes: label " + std::to_string(labels[j]) +
                                  " is not in the task's class set");
    }
    Prototype& p = it->second;
    for (std::size_t c = 0; c < d; ++c) p.mean[c] += features.at(j, c);
    ++p.count;
  }
  for (auto& [k, p] : out) {
    if (p.count == 0) {
      throw std::invalid_argument("compute_prototypes: class " + std::to_string(k) + " has no samples");
    }
    const double inv = static_cast<double>(p.count);
    for (auto& v : p.mean.data()) v /= inv;
  }
  return out;
}

/// Probabilities over the classes seen so far, in ascending class-id order.
struct PredictionDistribution {
  std::vector<ClassId> classes;
  std::vector<double> probs;

  ClassId argmax() const {
    return classes[static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin())];
  }
  double prob(ClassId k) const {
    auto it = std::find(classes.begin(), classes.end(), k);
    if (it == classes.end()) throw std::out_of_range("class " + std::to_string(k) + " not in support");
    return probs[static_cast<std::size_t>(it - classes.begin())];
  }
};

/// Class prototypes accumulated across tasks. Existing prototypes never change.
class PrototypeBank {
 public:
  PrototypeBank() = default;
  explicit PrototypeBank(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return protos_.size(); }
  bool empty() const noexcept { return protos_.empty(); }
  const std::map<ClassId, Prototype>& prototypes() const noexcept { return protos_; }

  std::vector<ClassId> classes() const {
    std::vector<ClassId> out;
    for (const auto& [k, p] : protos_) out.push_back(k);
    return out;
  }

  /// Adds new classes; rejects the whole batch if any id is already present.
  void extend(const std::map<ClassId, Prototype>& fresh) {
    for (const auto& [k, p] : fresh) {
      if (protos_.contains(k)) {
        throw std::invalid_argument("extend_bank: class " + std::to_string(k) +
                                    " already has a prototype (label spaces must be disjoint)");
      }
      if (dim_ == 0) dim_ = p.mean.numel();
      if (p.mean.shape() != Shape{dim_}) {
        throw ShapeError("extend_bank: prototype for class " + std::to_string(k) + " has shape " +
                         shape_str(p.mean.shape()) + ", bank dim is " + std::to_string(dim_));
      }
    }
    for (const auto& [k, p] : fresh) protos_.emplace(k, p);
  }

  /// Prototypes as columns: [d × K] in class-id order.
  Tensor matrix_t() const {
    if (protos_.empty()) throw std::logic_error("prototype bank is empty");
    const std::size_t K = protos_.size();
    Tensor out(Shape{dim_, K});
    std::size_t col = 0;
    for (const auto& [k, p] : protos_) {
      for (std::size_t c = 0; c < dim_; ++c) out.at(c, col) = p.mean[c];
      ++col;
    }
    return out;
  }

 private:
  std::size_t dim_ = 0;
  std::map<ClassId, Prototype> protos_;
};

inline void extend_bank(PrototypeBank& bank, const std::map<ClassId, Prototype>& fresh) {
  bank.extend(fresh);
}

/// softmax_k(z · c_k) over every class in the bank. With `cosine`, z and c_k are
/// L2-normalised first.
inline PredictionDistribution predict(std::span<const double> z, const PrototypeBank& bank,
                                      bool cosine = false) {
  if (bank.empty()) throw std::logic_error("predict: prototype bank is empty");
  if (z.size() != bank.dim()) {
    throw ShapeError("predict: feature has " + std::to_string(z.size()) + " dims, bank has " +
                     std::to_string(bank.dim()));
  }
  auto norm = [](std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  const double zn = cosine ? std::max(norm(z), 1e-12) : 1.0;
  PredictionDistribution out;
  std::vector<double> logits;
  for (const auto& [k, p] : bank.prototypes()) {
    double dot = 0.0;
    for (std::size_t c = 0; c < z.size(); ++c) dot += z[c] * p.mean[c];
    if (cosine) dot /= zn * std::max(norm(p.mean.data()), 1e-12);
    out.classes.push_back(k);
    logits.push_back(dot);
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double l : logits) {
    out.probs.push_back(std::exp(l - mx));
    total += out.probs.back();
  }
  for (auto& p : out.probs) p /= total;
  return out;
}

}  // namespace ttacil
