#pragma once

// Test-time refinement: per-batch marginal-entropy minimisation over augmented
// views, followed by prediction on the clean inputs and a reset to E*.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <mutex>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "ttacil/augment.hpp"
#include "ttacil/autograd.hpp"
#include "ttacil/data.hpp"
#include "ttacil/encoder.hpp"
#include "ttacil/optim.hpp"
#include "ttacil/params.hpp"
#include "ttacil/prototypes.hpp"
#include "ttacil/rng.hpp"

namespace ttacil {

inline constexpr double kEntropyLogFloor = 1e-12;

enum class ResetPolicy { PerBatch, None };

inline ResetPolicy reset_policy_from_string(std::string_view s) {
  if (s == "per-batch") return ResetPolicy::PerBatch;
  if (s == "none") return ResetPolicy::None;
  throw std::invalid_argument("unknown reset policy '" + std::string(s) + "'");
}

inline std::string_view to_string(ResetPolicy r) {
  return r == ResetPolicy::PerBatch ? "per-batch" : "none";
}

struct TTAConfig {
  std::size_t iterations = 1;  // N
  std::size_t batch_size = 16;  // B
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  TrainMode param_mode = TrainMode::Norm;
  ResetPolicy reset = ResetPolicy::PerBatch;
  bool predict_from_marginal = false;
  AugmentationPolicy augmentation;  // views == M

  std::size_t views() const noexcept { return augmentation.views; }

  void validate() const {
    if (iterations == 0) throw std::invalid_argument("tta: iterations (N) must be positive");
    if (batch_size == 0) throw std::invalid_argument("tta: batch_size (B) must be positive");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("tta: lr must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("tta: momentum in [0,1)");
    if (weight_decay < 0.0) throw std::invalid_argument("tta: weight_decay must be >= 0");
    if (param_mode == TrainMode::Head) throw std::invalid_argument("tta: head mode is not a test-time mode");
    augmentation.validate();
  }
};

/// Shannon entropy in nats with log floored at 1e-12.
inline double marginal_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) h -= v * std::log(std::max(v, kEntropyLogFloor));
  return h;
}

/// Mean of the per-view prototype distributions (gradient-free).
inline std::vector<double> marginal_distribution(const VitEncoder& enc, const PrototypeBank& bank,
                                                 const Tensor& views) {
  const Tensor z = enc.encode(views);
  const std::size_t M = z.dim(0), d = z.dim(1);
  std::vector<double> mean(bank.size(), 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    const auto p = predict(std::span<const double>(z.data().data() + m * d, d), bank);
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += p.probs[k];
  }
  for (auto& v : mean) v /= static_cast<double>(M);
  return mean;
}

/// Batch objective on the tape: mean over B samples of H(p̄ᵢ), where p̄ᵢ averages
/// softmax(z · Cᵀ) over the M consecutive views of sample i. Prototypes are constants.
inline ag::Var marginal_entropy_loss(const VitEncoder& enc, ParamBinding& bind,
                                     const Tensor& protos_t, const Tensor& views,
                                     std::size_t batch, std::size_t m) {
  ag::Tape& tape = bind.tape();
  ag::Var z = enc.forward(bind, views);
  ag::Var logits = ag::matmul(z, tape.constant(protos_t));
  ag::Var p = ag::softmax(logits);
  ag::Var pbar = ag::mean(ag::reshape(p, Shape{batch, m, protos_t.dim(1)}), 1);
  ag::Var plogp = ag::mul(pbar, ag::log(pbar, kEntropyLogFloor));
  return ag::scale(ag::sum(plogp), -1.0 / static_cast<double>(batch));
}

/// Views for a batch: sample i's M views come from a stream keyed by
/// (seed, sample id, iteration), independent of batch composition.
inline Tensor augment_batch(std::span<const Sample> batch, const AugmentationPolicy& policy,
                            std::uint64_t seed, std::size_t iteration) {
  std::vector<Tensor> views;
  views.reserve(batch.size() * policy.views);
  for (const auto& s : batch) {
    std::mt19937_64 rng(derive_seed({seed, s.id, iteration}));
    auto v = augment(s.image, policy, rng);
    for (auto& t : v) views.push_back(std::move(t));
  }
  return stack_images(views);
}

struct AdaptStats {
  std::vector<double> objective;  // batch objective at each iteration, before its step
};

/// N constant-lr SGD steps on the batch objective over select_parameters(param_mode).
/// `opt` must have been created over that same parameter set.
inline AdaptStats adapt_on_batch(VitEncoder& enc, std::span<const Sample> batch,
                                 const PrototypeBank& bank, const TTAConfig& cfg,
                                 OptimizerState& opt, std::uint64_t seed) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("adapt_on_batch: empty batch");
  const auto trainable = select_parameters(enc.params(), cfg.param_mode);
  const Tensor protos_t = bank.matrix_t();
  const std::size_t B = batch.size(), M = cfg.views();
  AdaptStats stats;
  for (std::size_t n = 0; n < cfg.iterations; ++n) {
    const Tensor views = augment_batch(batch, cfg.augmentation, seed, n);
    ag::Tape tape;
    ParamBinding bind(tape, enc.params(), trainable);
    ag::Var loss = marginal_entropy_loss(enc, bind, protos_t, views, B, M);
    stats.objective.push_back(loss.value().item());
    tape.backward(loss);
    GradientMap grads = bind.gradients();
    if (cfg.weight_decay > 0.0) {
      for (auto& [name, g] : grads) {
        const Tensor& p = enc.params().get(name);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += cfg.weight_decay * p[i];
      }
    }
    sgd_step(enc.params(), grads, opt, n);
  }
  return stats;
}

/// Entropies are means over the batch of H(p(·|x)) for the clean inputs, with E*
/// (pre) and with the adapted encoder (post).
struct BatchLog {
  std::size_t batch_id = 0;
  std::size_t size = 0;
  double pre_entropy = 0.0;
  double post_entropy = 0.0;
  double first_objective = 0.0;  // augmented-view objective at the first step
  double pre_accuracy = 0.0;
  double post_accuracy = 0.0;
};

struct TtaRun {
  std::vector<ClassId> predictions;      // post-adaptation, in input order
  std::vector<ClassId> pre_predictions;  // E* on the same clean samples
  std::vector<BatchLog> batches;
};

/// Clean-sample distributions with the encoder's current parameters.
inline std::vector<PredictionDistribution> predict_distributions(const VitEncoder& enc,
                                                                 std::span<const Sample> samples,
                                                                 const PrototypeBank& bank) {
  std::vector<Tensor> imgs;
  imgs.reserve(samples.size());
  for (const auto& s : samples) imgs.push_back(s.image);
  const Tensor z = enc.encode(stack_images(imgs));
  const std::size_t d = z.dim(1);
  std::vector<PredictionDistribution> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.push_back(predict(std::span<const double>(z.data().data() + i * d, d), bank));
  }
  return out;
}

inline std::vector<ClassId> predict_samples(const VitEncoder& enc, std::span<const Sample> samples,
                                            const PrototypeBank& bank) {
  std::vector<ClassId> out;
  for (const auto& p : predict_distributions(enc, samples, bank)) out.push_back(p.argmax());
  return out;
}

namespace detail {

struct BatchOutcome {
  BatchLog log;
  std::vector<ClassId> pre;
  std::vector<ClassId> post;
};

inline double mean_entropy(const std::vector<PredictionDistribution>& ds) {
  double h = 0.0;
  for (const auto& p : ds) h += marginal_entropy(p.probs);
  return h / static_cast<double>(ds.size());
}

inline double batch_accuracy(std::span<const Sample> b, std::span<const ClassId> pred) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < b.size(); ++i) ok += b[i].label == pred[i] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(b.size());
}

/// Adapts from the encoder's current state and predicts the clean batch.
inline BatchOutcome adapt_and_predict(VitEncoder& enc, std::span<const Sample> batch, std::size_t batch_id,
                                      const PrototypeBank& bank, const TTAConfig& cfg, OptimizerState& opt,
                                      std::uint64_t seed) {
  BatchOutcome out;
  const auto pre_dist = predict_distributions(enc, batch, bank);
  for (const auto& p : pre_dist) out.pre.push_back(p.argmax());
  const AdaptStats st = adapt_on_batch(enc, batch, bank, cfg, opt, seed);
  const auto post_dist = predict_distributions(enc, batch, bank);
  if (cfg.predict_from_marginal) {
    const auto classes = bank.classes();
    for (const auto& s : batch) {
      std::mt19937_64 rng(derive_seed({seed, s.id, cfg.iterations}));
      const auto p = marginal_distribution(enc, bank, stack_images(augment(s.image, cfg.augmentation, rng)));
      out.post.push_back(classes[static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin())]);
    }
  } else {
    for (const auto& p : post_dist) out.post.push_back(p.argmax());
  }
  out.log = {batch_id,
             batch.size(),
             mean_entropy(pre_dist),
             mean_entropy(post_dist),
             st.objective.front(),
             batch_accuracy(batch, out.pre),
             batch_accuracy(batch, out.post)};
  return out;
}

}  // namespace detail

/// Runs every batch of `samples` (consecutive chunks of cfg.batch_size): restore E*
/// (unless reset is disabled), adapt, predict the clean inputs. Labels are used only
/// for the accuracy columns of the log. On return the encoder holds E* again.
///
/// With per-batch reset and `workers` > 1, batches run concurrently on private
/// encoder replicas; the result is identical to the sequential run.
inline TtaRun predict_with_reset(VitEncoder& enc, const ModelCheckpoint& e_star,
                                 std::span<const Sample> samples, const PrototypeBank& bank,
                                 const TTAConfig& cfg, std::uint64_t seed, std::size_t workers = 1) {
  cfg.validate();
  restore(enc.params(), e_star);
  const auto trainable = select_parameters(enc.params(), cfg.param_mode);
  const std::size_t num_batches = (samples.size() + cfg.batch_size - 1) / cfg.batch_size;
  auto batch_at = [&](std::size_t b) {
    const std::size_t start = b * cfg.batch_size;
    return samples.subspan(start, std::min(cfg.batch_size, samples.size() - start));
  };
  std::vector<detail::BatchOutcome> outcomes(num_batches);

  if (cfg.reset == ResetPolicy::PerBatch && workers > 1 && num_batches > 1) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto worker = [&] {
      try {
        VitEncoder local = enc;
        for (std::size_t b = next++; b < num_batches; b = next++) {
          restore(local.params(), e_star);
          OptimizerState opt(local.params(), trainable, cfg.lr, cfg.momentum);
          outcomes[b] = detail::adapt_and_predict(local, batch_at(b), b, bank, cfg, opt, seed);
        }
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        next = num_batches;
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, num_batches); ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  } else {
    OptimizerState opt(enc.params(), trainable, cfg.lr, cfg.momentum);
    for (std::size_t b = 0; b < num_batches; ++b) {
      if (cfg.reset == ResetPolicy::PerBatch) {
        restore(enc.params(), e_star);
        opt = OptimizerState(enc.params(), trainable, cfg.lr, cfg.momentum);
      }
      outcomes[b] = detail::adapt_and_predict(enc, batch_at(b), b, bank, cfg, opt, seed);
    }
  }
  restore(enc.params(), e_star);

  TtaRun run;
  for (auto& o : outcomes) {
    run.batches.push_back(o.log);
    run.pre_predictions.insert(run.pre_predictions.end(), o.pre.begin(), o.pre.end());
    run.predictions.insert(run.predictions.end(), o.post.begin(), o.post.end());
  }
  return run;
}

}  // namespace ttacil
