#pragma once

// Class-incremental protocol: first-session training, per-task prototype banking
// and task-agnostic evaluation over every class seen so far.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ttacil/corruption.hpp"
#include "ttacil/data.hpp"
#include "ttacil/encoder.hpp"
#include "ttacil/prototypes.hpp"
#include "ttacil/rng.hpp"
#include "ttacil/stream.hpp"
#include "ttacil/trainer.hpp"
#include "ttacil/tta.hpp"

namespace ttacil {

enum class Method { FrozenPc, FirstSessionOnly, Ttacil, FinetuneAdapter };

inline Method method_from_string(std::string_view s) {
  if (s == "frozen-pc") return Method::FrozenPc;
  if (s == "first-session-only") return Method::FirstSessionOnly;
  if (s == "ttacil") return Method::Ttacil;
  if (s == "finetune-adapter" || s == "finetune-adapter-all-tasks") return Method::FinetuneAdapter;
  throw std::invalid_argument("unknown method '" + std::string(s) + "'");
}

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::FrozenPc: return "frozen-pc";
    case Method::FirstSessionOnly: return "first-session-only";
    case Method::Ttacil: return "ttacil";
    case Method::FinetuneAdapter: return "finetune-adapter";
  }
  return "?";
}

/// Order of the evaluation samples fed to test-time adaptation. ByTask keeps the
/// test sets of earlier tasks first, so each batch is dominated by one task.
enum class EvalOrder { ByTask, Shuffled };

inline EvalOrder eval_order_from_string(std::string_view s) {
  if (s == "by-task") return EvalOrder::ByTask;
  if (s == "shuffled") return EvalOrder::Shuffled;
  throw std::invalid_argument("unknown eval order '" + std::string(s) + "'");
}

inline std::string_view to_string(EvalOrder o) { return o == EvalOrder::ByTask ? "by-task" : "shuffled"; }

struct MetricsReport {
  std::vector<double> per_task;  // A_1 … A_T
  double average = 0.0;          // Ā
  double last = 0.0;             // A_T
};

namespace detail {

// Adds x to a sum held as non-overlapping partials, without rounding error.
inline void grow_expansion(std::vector<double>& partials, double x) {
  std::size_t n = 0;
  for (double y : partials) {
    if (std::abs(x) < std::abs(y)) std::swap(x, y);
    const double hi = x + y;
    const double lo = y - (hi - x);
    if (lo != 0.0) partials[n++] = lo;
    x = hi;
  }
  partials.resize(n);
  partials.push_back(x);
}

inline double expansion_value(const std::vector<double>& partials) {
  double v = 0.0;
  for (double p : partials) v += p;
  return v;
}

}  // namespace detail

/// Arithmetic mean computed from the exact sum, so it does not depend on the order of `xs`.
inline double exact_mean(std::span<const double> xs) {
  std::vector<double> sum;
  for (double x : xs) detail::grow_expansion(sum, x);
  const double T = static_cast<double>(xs.size());
  const double q = detail::expansion_value(sum) / T;
  // Exact remainder sum - q*T; q*T is split into its rounded product and the fma error.
  // The product goes through fma so the compiler cannot contract it into the following sum.
  const double prod = std::fma(q, T, 0.0);
  std::vector<double> rem = sum;
  detail::grow_expansion(rem, -prod);
  detail::grow_expansion(rem, -std::fma(q, T, -prod));
  return q + detail::expansion_value(rem) / T;
}

inline MetricsReport compute_metrics(std::span<const double> accuracies) {
  if (accuracies.empty()) throw std::invalid_argument("compute_metrics: empty accuracy list");
  for (double a : accuracies) {
    if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("compute_metrics: accuracy outside [0,1]");
  }
  MetricsReport r;
  r.per_task.assign(accuracies.begin(), accuracies.end());
  r.average = exact_mean(accuracies);
  r.last = accuracies.back();
  return r;
}

struct ProtocolConfig {
  EncoderConfig encoder;
  Phase1Config phase1;
  TTAConfig tta;
  std::optional<CorruptionSpec> corruption;  // applied to every test split
  EvalOrder eval_order = EvalOrder::ByTask;
};

/// Initial encoder and its Phase-I adaptation for one run seed.
struct FirstSession {
  ModelCheckpoint initial;
  ModelCheckpoint e_star;
  std::vector<EpochLog> log;
};

inline VitEncoder make_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  return VitEncoder(cfg, derive_seed({seed, seed_tag::kEncoderInit}));
}

inline FirstSession prepare_first_session(const ProtocolConfig& cfg, const TaskStream& stream,
                                          std::uint64_t seed) {
  if (stream.tasks.empty()) throw std::invalid_argument("prepare_first_session: empty stream");
  VitEncoder enc = make_encoder(cfg.encoder, seed);
  FirstSession fs;
  fs.initial = snapshot(enc.params());
  auto res = train_first_session(enc, stream.tasks.front().train, cfg.phase1,
                                 derive_seed({seed, seed_tag::kPhase1}));
  fs.e_star = std::move(res.checkpoint);
  fs.log = std::move(res.log);
  return fs;
}

struct TaskBatchLog {
  std::size_t task = 0;  // evaluation point (0-based)
  BatchLog batch;
};

struct RunResult {
  MetricsReport metrics;
  std::vector<std::size_t> eval_sizes;
  /// ttacil only: accuracy of E* on the same evaluation batches before adaptation.
  std::vector<double> pre_adaptation_accuracy;
  std::vector<TaskBatchLog> tta_log;
  std::vector<EpochLog> phase1_log;
};

/// Encodes a task's training split with the current encoder and returns its prototypes.
inline std::map<ClassId, Prototype> task_prototypes(const VitEncoder& enc, const Task& task) {
  std::vector<Tensor> imgs;
  std::vector<ClassId> labels;
  for (const auto& s : task.train) {
    imgs.push_back(s.image);
    labels.push_back(s.label);
  }
  if (imgs.empty()) throw std::invalid_argument("task " + std::to_string(task.index) + " has no training data");
  return compute_prototypes(enc.encode(stack_images(imgs)), labels, task.classes);
}

/// Full incremental run for one method and seed. `cache` may carry a FirstSession
/// computed earlier for the same (config, stream, seed). `workers` only affects speed.
inline RunResult run_protocol(const ProtocolConfig& cfg, const TaskStream& stream, Method method,
                              std::uint64_t seed, const FirstSession* cache = nullptr,
                              std::size_t workers = 1) {
  if (stream.tasks.empty()) throw std::invalid_argument("run_protocol: empty stream");
  if (method == Method::Ttacil) cfg.tta.validate();
  cfg.phase1.validate();
  {
    std::set<ClassId> seen;
    for (const auto& t : stream.tasks) {
      for (ClassId k : t.classes) {
        if (!seen.insert(k).second) {
          throw std::invalid_argument("run_protocol: class " + std::to_string(k) + " appears in two tasks");
        }
      }
    }
  }

  std::vector<std::vector<Sample>> tests;
  for (const auto& t : stream.tasks) {
    std::vector<Sample> ts = t.test;
    if (cfg.corruption) {
      for (auto& s : ts) s.image = apply_corruption(s.image, *cfg.corruption);
    }
    tests.push_back(std::move(ts));
  }

  VitEncoder enc = make_encoder(cfg.encoder, seed);
  RunResult out;
  FirstSession local;
  const FirstSession* fs = cache;
  if (method != Method::FrozenPc && fs == nullptr) {
    local = prepare_first_session(cfg, stream, seed);
    fs = &local;
  }
  if (fs != nullptr && method != Method::FrozenPc) {
    restore(enc.params(), fs->e_star);
    out.phase1_log = fs->log;
  }

  PrototypeBank bank(cfg.encoder.embed_dim);
  std::vector<double> accs;
  std::vector<Sample> seen_tests;
  for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
    const Task& task = stream.tasks[t];
    if (method == Method::FinetuneAdapter && t > 0) {
      auto res = train_first_session(enc, task.train, cfg.phase1,
                                     derive_seed({seed, seed_tag::kFinetune, t}));
      out.phase1_log.insert(out.phase1_log.end(), res.log.begin(), res.log.end());
    }
    bank.extend(task_prototypes(enc, task));
    seen_tests.insert(seen_tests.end(), tests[t].begin(), tests[t].end());

    std::vector<Sample> eval = seen_tests;
    if (cfg.eval_order == EvalOrder::Shuffled) {
      std::mt19937_64 rng(derive_seed({seed, seed_tag::kEvalOrder, t}));
      std::shuffle(eval.begin(), eval.end(), rng);
    }
    auto correct = [&eval](std::span<const ClassId> pred) {
      std::size_t ok = 0;
      for (std::size_t i = 0; i < eval.size(); ++i) ok += eval[i].label == pred[i] ? 1 : 0;
      return static_cast<double>(ok) / static_cast<double>(eval.size());
    };

    if (method == Method::Ttacil) {
      TtaRun run = predict_with_reset(enc, fs->e_star, eval, bank, cfg.tta,
                                      derive_seed({seed, seed_tag::kTta}), workers);
      accs.push_back(correct(run.predictions));
      out.pre_adaptation_accuracy.push_back(correct(run.pre_predictions));
      for (const auto& b : run.batches) out.tta_log.push_back({t, b});
    } else {
      accs.push_back(correct(predict_samples(enc, eval, bank)));
    }
    out.eval_sizes.push_back(eval.size());
  }
  out.metrics = compute_metrics(accs);
  return out;
}

}  // namespace ttacil
