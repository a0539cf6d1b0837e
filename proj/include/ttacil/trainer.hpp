#pragma once

// First-session adapter training with a temporary linear head.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ttacil/autograd.hpp"
#include "ttacil/data.hpp"
#include "ttacil/encoder.hpp"
#include "ttacil/optim.hpp"
#include "ttacil/params.hpp"
#include "ttacil/rng.hpp"

namespace ttacil {

/// Initial weights of the temporary head: all zeros, or U(±1/√d) like a default
/// linear layer. Biases always start at zero.
enum class HeadInit { Zero, Uniform };

inline HeadInit head_init_from_string(std::string_view s) {
  if (s == "zero") return HeadInit::Zero;
  if (s == "uniform") return HeadInit::Uniform;
  throw std::invalid_argument("unknown head init '" + std::string(s) + "'");
}

inline std::string_view to_string(HeadInit h) { return h == HeadInit::Zero ? "zero" : "uniform"; }

struct Phase1Config {
  std::size_t epochs = 20;
  double base_lr = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 4;
  bool cosine = true;
  double weight_decay = 0.0;
  HeadInit head_init = HeadInit::Uniform;

  void validate() const {
    if (epochs == 0) throw std::invalid_argument("phase1: epochs must be positive");
    if (batch_size == 0) throw std::invalid_argument("phase1: batch_size must be positive");
    if (!(base_lr >= 0.0)) throw std::invalid_argument("phase1: lr must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("phase1: momentum in [0,1)");
    if (weight_decay < 0.0) throw std::invalid_argument("phase1: weight_decay must be >= 0");
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
};

/// Appends a d→K linear head ("head.weight" [d×K], "head.bias" [K]). Zero-initialised
/// unless `seed` is given, in which case weights ~ U(±1/√d).
inline void attach_head(VitEncoder& enc, std::size_t num_classes, std::optional<std::uint64_t> seed = {}) {
  if (num_classes < 2) throw std::invalid_argument("attach_head: need at least 2 classes");
  const std::size_t d = enc.config().embed_dim;
  auto& store = enc.params();
  store.remove_group(ParamGroup::Head);
  Tensor w(Shape{d, num_classes}, 0.0);
  if (seed) {
    std::mt19937_64 rng(*seed);
    const double b = 1.0 / std::sqrt(static_cast<double>(d));
    std::uniform_real_distribution<double> u(-b, b);
    for (auto& v : w.data()) v = u(rng);
  }
  store.add("head.weight", ParamGroup::Head, std::move(w));
  store.add("head.bias", ParamGroup::Head, Tensor(Shape{num_classes}, 0.0));
}

inline void detach_head(VitEncoder& enc) { enc.params().remove_group(ParamGroup::Head); }

/// Head logits for a batch: z · W + b.
inline ag::Var head_logits(ParamBinding& bind, const ag::Var& z) {
  return ag::add(ag::matmul(z, bind("head.weight")), bind("head.bias"));
}

/// Cross-entropy of head logits for a batch of images against head-local labels.
inline double head_cross_entropy(const VitEncoder& enc, const Tensor& images,
                                 const std::vector<std::size_t>& labels) {
  ag::Tape tape;
  ParamBinding bind(tape, enc.params(), {});
  return ag::cross_entropy(head_logits(bind, enc.forward(bind, images)), labels).value().item();
}

struct Phase1Result {
  ModelCheckpoint checkpoint;  // encoder without head
  std::vector<EpochLog> log;
};

/// Trains adapters and a temporary head on `train` with cross-entropy; the backbone
/// and norm parameters stay frozen. Mini-batches are reshuffled each epoch from
/// `seed`; the last partial batch is kept. The head is removed before returning.
inline Phase1Result train_first_session(VitEncoder& enc, const std::vector<Sample>& train,
                                        const Phase1Config& cfg, std::uint64_t seed) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("train_first_session: empty training set");

  std::map<ClassId, std::size_t> head_index;
  for (const auto& s : train) head_index.emplace(s.label, 0);
  std::size_t next = 0;
  for (auto& [k, idx] : head_index) idx = next++;
  attach_head(enc, std::max<std::size_t>(head_index.size(), 2),
              cfg.head_init == HeadInit::Uniform ? std::optional<std::uint64_t>(derive_seed({seed, 0x4EAD}))
                                                 : std::nullopt);

  std::vector<std::string> trainable = select_parameters(enc.params(), TrainMode::Adapter);
  for (const auto& n : select_parameters(enc.params(), TrainMode::Head)) trainable.push_back(n);

  const std::size_t n = train.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  OptimizerState opt(enc.params(), trainable, cfg.base_lr, cfg.momentum,
                     LrSchedule{cfg.cosine, steps_per_epoch * cfg.epochs});

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Phase1Result result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double epoch_lr = opt.lr(step);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t m = std::min(cfg.batch_size, n - start);
      std::vector<Tensor> imgs;
      std::vector<std::size_t> labels;
      for (std::size_t i = 0; i < m; ++i) {
        const Sample& s = train[order[start + i]];
        imgs.push_back(s.image);
        labels.push_back(head_index.at(s.label));
      }
      ag::Tape tape;
      ParamBinding bind(tape, enc.params(), trainable);
      ag::Var loss = ag::cross_entropy(head_logits(bind, enc.forward(bind, stack_images(imgs))), labels);
      tape.backward(loss);
      GradientMap grads = bind.gradients();
      if (cfg.weight_decay > 0.0) {
        for (auto& [name, g] : grads) {
          const Tensor& p = enc.params().get(name);
          for (std::size_t i = 0; i < g.numel(); ++i) g[i] += cfg.weight_decay * p[i];
        }
      }
      sgd_step(enc.params(), grads, opt, step++);
      loss_sum += loss.value().item() * static_cast<double>(m);
    }
    result.log.push_back({epoch + 1, epoch_lr, loss_sum / static_cast<double>(n)});
  }
  detach_head(enc);
  result.checkpoint = snapshot(enc.params());
  return result;
}

}  // namespace ttacil
