#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ttacil/tensor.hpp"

namespace ttacil {

/// Every parameter belongs to exactly one group.
enum class ParamGroup { Backbone, Adapter, Norm, Head };

inline std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::Backbone: return "backbone";
    case ParamGroup::Adapter: return "adapter";
    case ParamGroup::Norm: return "norm";
    case ParamGroup::Head: return "head";
  }
  return "?";
}

inline ParamGroup param_group_from_string(std::string_view s) {
  if (s == "backbone") return ParamGroup::Backbone;
  if (s == "adapter") return ParamGroup::Adapter;
  if (s == "norm") return ParamGroup::Norm;
  if (s == "head") return ParamGroup::Head;
  throw std::invalid_argument("unknown parameter group '" + std::string(s) + "'");
}

struct ParamEntry {
  std::string name;
  ParamGroup group;
  Tensor value;
};

/// Gradients or other per-parameter tensors keyed by parameter name.
using GradientMap = std::map<std::string, Tensor>;

class ModelCheckpoint;

/// Named, group-tagged parameter tensors in insertion order.
class ParameterStore {
 public:
  void add(std::string name, ParamGroup group, Tensor value) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), group, std::move(value)});
  }

  void remove_group(ParamGroup group) {
    std::erase_if(entries_, [group](const ParamEntry& e) { return e.group == group; });
    reindex();
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  const ParamEntry& entry(const std::string& name) const { return entries_[lookup(name)]; }
  const Tensor& get(const std::string& name) const { return entries_[lookup(name)].value; }
  Tensor& get_mut(const std::string& name) { return entries_[lookup(name)].value; }

  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  std::vector<ParamEntry>& entries_mut() noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::vector<std::string> names_in(ParamGroup group) const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
      if (e.group == group) out.push_back(e.name);
    }
    return out;
  }

  std::size_t numel(ParamGroup group) const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (e.group == group) n += e.value.numel();
    }
    return n;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
  }

  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(entries_[i].name, i);
  }

  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Immutable copy of every tensor in a ParameterStore, with group tags.
class ModelCheckpoint {
 public:
  ModelCheckpoint() = default;
  explicit ModelCheckpoint(std::vector<ParamEntry> entries) : entries_(std::move(entries)) {}

  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  bool empty() const noexcept { return entries_.empty(); }

  const Tensor& get(const std::string& name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return e.value;
    }
    throw std::out_of_range("checkpoint has no parameter named '" + name + "'");
  }

 private:
  std::vector<ParamEntry> entries_;
};

/// Thrown when a checkpoint does not match the store it is restored into.
class SchemaError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline ModelCheckpoint snapshot(const ParameterStore& store) {
  return ModelCheckpoint(store.entries());
}

/// Overwrites every parameter with the checkpointed value. The store must have the
/// same names, groups and shapes in the same order.
inline void restore(ParameterStore& store, const ModelCheckpoint& ckpt) {
  auto& dst = store.entries_mut();
  const auto& src = ckpt.entries();
  if (dst.size() != src.size()) {
    throw SchemaError("checkpoint has " + std::to_string(src.size()) + " tensors, store has " +
                      std::to_string(dst.size()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].name != src[i].name || dst[i].group != src[i].group ||
        dst[i].value.shape() != src[i].value.shape()) {
      throw SchemaError("checkpoint entry '" + src[i].name + "' does not match store entry '" +
                        dst[i].name + "'");
    }
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    std::copy(src[i].value.data().begin(), src[i].value.data().end(), dst[i].value.data().begin());
  }
}

/// True when every tensor of `store` equals the checkpoint bit for bit.
inline bool matches_bitwise(const ParameterStore& store, const ModelCheckpoint& ckpt) {
  const auto& a = store.entries();
  const auto& b = ckpt.entries();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].group != b[i].group || !bitwise_equal(a[i].value, b[i].value)) {
      return false;
    }
  }
  return true;
}

}  // namespace ttacil
