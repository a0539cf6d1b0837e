#pragma once

// Small Vision-Transformer feature extractor with parallel bottleneck adapters.
//
// Block wiring (pre-norm):
//   x ← x + Proj(MHSA(LN₁(x)))
//   h = LN₂(x)
//   x ← x + MLP(h) + s · ReLU(h W_down + b_down) W_up + b_up
// The feature z of an image is the final layer-norm output at the class token.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ttacil/autograd.hpp"
#include "ttacil/params.hpp"
#include "ttacil/tensor.hpp"

namespace ttacil {

struct AdapterConfig {
  std::size_t hidden_dim = 8;
  double scale = 0.1;
  bool learnable_scale = false;
  bool enabled = true;
};

struct EncoderConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  double mlp_ratio = 2.0;
  AdapterConfig adapter;
  double ln_epsilon = 1e-6;

  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t num_tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(embed_dim)));
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("encoder config: " + m); };
    if (image_size == 0 || patch_size == 0 || channels == 0 || embed_dim == 0 || depth == 0 ||
        heads == 0) {
      fail("sizes must be positive");
    }
    if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
    if (embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
    if (!(mlp_ratio > 0.0) || mlp_hidden() == 0) fail("mlp_ratio must be positive");
    if (adapter.hidden_dim == 0 || adapter.hidden_dim >= embed_dim) {
      fail("adapter hidden_dim must satisfy 0 < r < embed_dim");
    }
    if (!(adapter.scale >= 0.0) || !std::isfinite(adapter.scale)) fail("adapter scale must be >= 0");
    if (!(ln_epsilon >= 0.0)) fail("ln_epsilon must be >= 0");
  }

  /// depth · (2·d·r + r + d), plus one scale per block when it is learnable.
  std::size_t expected_adapter_numel() const {
    if (!adapter.enabled) return 0;
    const std::size_t d = embed_dim, r = adapter.hidden_dim;
    return depth * (2 * d * r + r + d + (adapter.learnable_scale ? 1 : 0));
  }
};

/// Which parameters an optimizer may touch.
enum class TrainMode { Norm, Adapter, All, Head };

inline TrainMode train_mode_from_string(std::string_view s) {
  if (s == "norm") return TrainMode::Norm;
  if (s == "adapter") return TrainMode::Adapter;
  if (s == "all") return TrainMode::All;
  if (s == "head") return TrainMode::Head;
  throw std::invalid_argument("unknown parameter-selection mode '" + std::string(s) + "'");
}

inline std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Norm: return "norm";
    case TrainMode::Adapter: return "adapter";
    case TrainMode::All: return "all";
    case TrainMode::Head: return "head";
  }
  return "?";
}

/// norm → every γ/β; adapter → φ; all → θ ∪ φ ∪ γβ (never the head); head → head only.
inline std::vector<std::string> select_parameters(const ParameterStore& store, TrainMode mode) {
  std::vector<std::string> out;
  for (const auto& e : store.entries()) {
    bool take = false;
    switch (mode) {
      case TrainMode::Norm: take = e.group == ParamGroup::Norm; break;
      case TrainMode::Adapter: take = e.group == ParamGroup::Adapter; break;
      case TrainMode::All: take = e.group != ParamGroup::Head; break;
      case TrainMode::Head: take = e.group == ParamGroup::Head; break;
    }
    if (take) out.push_back(e.name);
  }
  return out;
}

/// Lazily places store parameters on a tape, as trainable leaves or constants.
class ParamBinding {
 public:
  ParamBinding(ag::Tape& tape, const ParameterStore& store, const std::vector<std::string>& trainable)
      : tape_(&tape), store_(&store), trainable_(trainable.begin(), trainable.end()) {
    for (const auto& n : trainable_) {
      if (!store.contains(n)) throw std::out_of_range("no parameter named '" + n + "'");
    }
  }

  ag::Var operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    ag::Var v = tape_->leaf(store_->get(name), trainable_.contains(name));
    vars_.emplace(name, v);
    return v;
  }

  ag::Tape& tape() { return *tape_; }

  /// Gradients for every trainable parameter after tape.backward(); zero when unreached.
  GradientMap gradients() const {
    GradientMap out;
    for (const auto& n : trainable_) {
      auto it = vars_.find(n);
      out.emplace(n, it == vars_.end() ? Tensor(store_->get(n).shape(), 0.0) : tape_->grad(it->second));
    }
    return out;
  }

 private:
  ag::Tape* tape_;
  const ParameterStore* store_;
  std::set<std::string> trainable_;
  std::map<std::string, ag::Var> vars_;
};

/// Stacks [H×W×C] images into one [n×H×W×C] tensor.
inline Tensor stack_images(std::span<const Tensor> images) {
  if (images.empty()) throw ShapeError("stack_images: no images");
  const Shape& s = images.front().shape();
  Shape out_shape{images.size()};
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  Tensor out(out_shape);
  const std::size_t per = images.front().numel();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != s) throw ShapeError("stack_images: mixed image shapes");
    std::copy(images[i].data().begin(), images[i].data().end(), out.data().begin() + i * per);
  }
  return out;
}

class VitEncoder {
 public:
  VitEncoder() = default;

  /// Fresh parameters. Linear weights ~ N(0, 2/(fan_in+fan_out)), biases 0,
  /// cls/pos ~ N(0, 0.02²), γ=1, β=0, W_down ~ U(±1/√d), W_up = 0.
  VitEncoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg_.embed_dim, h = cfg_.mlp_hidden(), r = cfg_.adapter.hidden_dim;
    auto normal = [&rng](Shape s, double std) {
      Tensor t(std::move(s));
      std::normal_distribution<double> dist(0.0, std);
      for (auto& v : t.data()) v = dist(rng);
      return t;
    };
    auto glorot = [&](std::size_t fan_in, std::size_t fan_out) {
      return normal(Shape{fan_in, fan_out}, std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)));
    };
    auto norm_pair = [&](const std::string& prefix) {
      store_.add(prefix + ".gamma", ParamGroup::Norm, Tensor(Shape{d}, 1.0));
      store_.add(prefix + ".beta", ParamGroup::Norm, Tensor(Shape{d}, 0.0));
    };

    store_.add("patch_embed.weight", ParamGroup::Backbone, glorot(cfg_.patch_dim(), d));
    store_.add("patch_embed.bias", ParamGroup::Backbone, Tensor(Shape{d}, 0.0));
    store_.add("cls_token", ParamGroup::Backbone, normal(Shape{d}, 0.02));
    store_.add("pos_embed", ParamGroup::Backbone, normal(Shape{cfg_.num_tokens(), d}, 0.02));
    for (std::size_t b = 0; b < cfg_.depth; ++b) {
      const std::string p = block_prefix(b);
      norm_pair(p + ".norm1");
      store_.add(p + ".attn.qkv.weight", ParamGroup::Backbone, glorot(d, 3 * d));
      store_.add(p + ".attn.qkv.bias", ParamGroup::Backbone, Tensor(Shape{3 * d}, 0.0));
      store_.add(p + ".attn.proj.weight", ParamGroup::Backbone, glorot(d, d));
      store_.add(p + ".attn.proj.bias", ParamGroup::Backbone, Tensor(Shape{d}, 0.0));
      norm_pair(p + ".norm2");
      store_.add(p + ".mlp.fc1.weight", ParamGroup::Backbone, glorot(d, h));
      store_.add(p + ".mlp.fc1.bias", ParamGroup::Backbone, Tensor(Shape{h}, 0.0));
      store_.add(p + ".mlp.fc2.weight", ParamGroup::Backbone, glorot(h, d));
      store_.add(p + ".mlp.fc2.bias", ParamGroup::Backbone, Tensor(Shape{d}, 0.0));
      if (cfg_.adapter.enabled) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(d));
        Tensor down(Shape{d, r});
        std::uniform_real_distribution<double> u(-bound, bound);
        for (auto& v : down.data()) v = u(rng);
        store_.add(p + ".adapter.down.weight", ParamGroup::Adapter, std::move(down));
        store_.add(p + ".adapter.down.bias", ParamGroup::Adapter, Tensor(Shape{r}, 0.0));
        store_.add(p + ".adapter.up.weight", ParamGroup::Adapter, Tensor(Shape{r, d}, 0.0));
        store_.add(p + ".adapter.up.bias", ParamGroup::Adapter, Tensor(Shape{d}, 0.0));
        if (cfg_.adapter.learnable_scale) {
          store_.add(p + ".adapter.scale", ParamGroup::Adapter, Tensor::scalar(cfg_.adapter.scale));
        }
      }
    }
    norm_pair("norm");
  }

  const EncoderConfig& config() const noexcept { return cfg_; }
  const ParameterStore& params() const noexcept { return store_; }
  ParameterStore& params() noexcept { return store_; }

  static std::string block_prefix(std::size_t b) { return "blocks." + std::to_string(b); }

  /// [n×H×W×C] (or a single [H×W×C]) -> [(n·P) × patch_dim], patches in raster order.
  Tensor patchify(const Tensor& images) const {
    const std::size_t S = cfg_.image_size, C = cfg_.channels, p = cfg_.patch_size;
    const Shape& s = images.shape();
    std::size_t n = 0;
    if (s.size() == 3 && s[0] == S && s[1] == S && s[2] == C) {
      n = 1;
    } else if (s.size() == 4 && s[1] == S && s[2] == S && s[3] == C) {
      n = s[0];
    } else {
      throw ShapeError("encoder expects images of shape [" + std::to_string(S) + "x" +
                       std::to_string(S) + "x" + std::to_string(C) + "], got " + shape_str(s));
    }
    const std::size_t g = cfg_.patches_per_side(), P = g * g, pd = cfg_.patch_dim();
    Tensor out(Shape{n * P, pd});
    for (std::size_t i = 0; i < n; ++i) {
      const double* img = images.data().data() + i * S * S * C;
      for (std::size_t gy = 0; gy < g; ++gy) {
        for (std::size_t gx = 0; gx < g; ++gx) {
          double* dst = out.data().data() + (i * P + gy * g + gx) * pd;
          for (std::size_t y = 0; y < p; ++y) {
            const double* src = img + ((gy * p + y) * S + gx * p) * C;
            std::copy_n(src, p * C, dst + y * p * C);
          }
        }
      }
    }
    return out;
  }

  std::size_t batch_count(const Tensor& images) const {
    return images.rank() == 3 ? 1 : images.dim(0);
  }

  /// Token sequence after the stem: [(n·T) × d].
  ag::Var embed(ParamBinding& bind, const Tensor& images) const {
    ag::Tape& tape = bind.tape();
    const std::size_t n = batch_count(images);
    ag::Var patches = tape.constant(patchify(images));
    ag::Var proj = ag::add(ag::matmul(patches, bind("patch_embed.weight")), bind("patch_embed.bias"));
    return ag::assemble_tokens(proj, bind("cls_token"), bind("pos_embed"), n);
  }

  /// The adapter branch s · (ReLU(h W_down + b_down) W_up + b_up).
  ag::Var adapter_branch(ParamBinding& bind, const std::string& p, const ag::Var& h) const {
    ag::Var down = ag::relu(
        ag::add(ag::matmul(h, bind(p + ".adapter.down.weight")), bind(p + ".adapter.down.bias")));
    ag::Var up = ag::add(ag::matmul(down, bind(p + ".adapter.up.weight")), bind(p + ".adapter.up.bias"));
    if (cfg_.adapter.learnable_scale) return ag::scale_by(up, bind(p + ".adapter.scale"));
    return ag::scale(up, cfg_.adapter.scale);
  }

  ag::Var block(ParamBinding& bind, std::size_t b, const ag::Var& x, std::size_t n) const {
    const std::string p = block_prefix(b);
    const double eps = cfg_.ln_epsilon;
    ag::Var h = ag::layer_norm(x, bind(p + ".norm1.gamma"), bind(p + ".norm1.beta"), eps);
    ag::Var qkv = ag::add(ag::matmul(h, bind(p + ".attn.qkv.weight")), bind(p + ".attn.qkv.bias"));
    ag::Var att = ag::attention(qkv, n, cfg_.num_tokens(), cfg_.heads);
    att = ag::add(ag::matmul(att, bind(p + ".attn.proj.weight")), bind(p + ".attn.proj.bias"));
    ag::Var x1 = ag::add(x, att);

    ag::Var h2 = ag::layer_norm(x1, bind(p + ".norm2.gamma"), bind(p + ".norm2.beta"), eps);
    ag::Var m = ag::gelu(ag::add(ag::matmul(h2, bind(p + ".mlp.fc1.weight")), bind(p + ".mlp.fc1.bias")));
    m = ag::add(ag::matmul(m, bind(p + ".mlp.fc2.weight")), bind(p + ".mlp.fc2.bias"));
    if (cfg_.adapter.enabled) m = ag::add(m, adapter_branch(bind, p, h2));
    return ag::add(x1, m);
  }

  /// Features z for a batch of images: [n × d].
  ag::Var forward(ParamBinding& bind, const Tensor& images) const {
    const std::size_t n = batch_count(images);
    ag::Var x = embed(bind, images);
    for (std::size_t b = 0; b < cfg_.depth; ++b) x = block(bind, b, x, n);
    x = ag::layer_norm(x, bind("norm.gamma"), bind("norm.beta"), cfg_.ln_epsilon);
    return ag::take_rows(x, cfg_.num_tokens(), 0);
  }

  /// Gradient-free features, computed in chunks; each row depends only on its own image.
  Tensor encode(const Tensor& images, std::size_t chunk = 64) const {
    const std::size_t n = batch_count(images);
    const std::size_t per = images.numel() / n;
    Tensor out(Shape{n, cfg_.embed_dim});
    for (std::size_t start = 0; start < n; start += chunk) {
      const std::size_t m = std::min(chunk, n - start);
      Shape cs{m, cfg_.image_size, cfg_.image_size, cfg_.channels};
      std::vector<double> buf(images.data().begin() + static_cast<std::ptrdiff_t>(start * per),
                              images.data().begin() + static_cast<std::ptrdiff_t>((start + m) * per));
      ag::Tape tape;
      ParamBinding bind(tape, store_, {});
      ag::Var z = forward(bind, Tensor(cs, std::move(buf)));
      std::copy(z.value().data().begin(), z.value().data().end(),
                out.data().begin() + static_cast<std::ptrdiff_t>(start * cfg_.embed_dim));
    }
    return out;
  }

 private:
  EncoderConfig cfg_;
  ParameterStore store_;
};

}  // namespace ttacil
