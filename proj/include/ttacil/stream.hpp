#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ttacil/data.hpp"

namespace ttacil {

struct Task {
  std::size_t index = 0;  // 0-based position in the stream
  std::vector<ClassId> classes;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

struct TaskStream {
  std::vector<Task> tasks;
  std::uint64_t order_seed = 0;

  std::size_t size() const noexcept { return tasks.size(); }
  std::size_t total_classes() const {
    std::size_t n = 0;
    for (const auto& t : tasks) n += t.classes.size();
    return n;
  }
};

/// Partitions the dataset's classes into tasks of the given sizes using a
/// permutation drawn from `order_seed`. Sample order within a split is preserved.
inline TaskStream build_task_stream(const Dataset& ds, const std::vector<std::size_t>& increments,
                                    std::uint64_t order_seed) {
  if (increments.empty()) throw std::invalid_argument("build_task_stream: no tasks requested");
  const std::size_t need = std::accumulate(increments.begin(), increments.end(), std::size_t{0});
  if (need > ds.num_classes) {
    throw std::invalid_argument("build_task_stream: increments sum to " + std::to_string(need) +
                                " but the dataset has " + std::to_string(ds.num_classes) + " classes");
  }
  if (std::find(increments.begin(), increments.end(), std::size_t{0}) != increments.end()) {
    throw std::invalid_argument("build_task_stream: every task needs at least one class");
  }
  std::vector<ClassId> perm(ds.num_classes);
  std::iota(perm.begin(), perm.end(), ClassId{0});
  std::mt19937_64 rng(order_seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  TaskStream stream;
  stream.order_seed = order_seed;
  std::size_t pos = 0;
  for (std::size_t t = 0; t < increments.size(); ++t) {
    Task task;
    task.index = t;
    task.classes.assign(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                        perm.begin() + static_cast<std::ptrdiff_t>(pos + increments[t]));
    std::sort(task.classes.begin(), task.classes.end());
    pos += increments[t];
    const std::set<ClassId> members(task.classes.begin(), task.classes.end());
    for (const auto& s : ds.train) {
      if (members.contains(s.label)) task.train.push_back(s);
    }
    for (const auto& s : ds.test) {
      if (members.contains(s.label)) task.test.push_back(s);
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

/// T tasks of `increment` classes each.
inline TaskStream build_task_stream(const Dataset& ds, std::size_t tasks, std::size_t increment,
                                    std::uint64_t order_seed) {
  return build_task_stream(ds, std::vector<std::size_t>(tasks, increment), order_seed);
}

}  // namespace ttacil
