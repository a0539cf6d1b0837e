#pragma once

// Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//
// A Tape records every primitive in execution order. Each node owns its value,
// its lazily-allocated gradient and a backward closure that pushes the node's
// gradient into those inputs that require one. backward() walks the tape once
// in reverse, so every node is visited exactly once.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "ttacil/kernels.hpp"
#include "ttacil/tensor.hpp"

namespace ttacil::ag {

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Tensor value;
    Tensor grad;
    Tensor saved;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var leaf(Tensor value, bool requires_grad) {
    check_finite(value, "leaf");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  /// Appends an op node; `fn` is dropped when no input requires a gradient.
  Var record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn,
             Tensor saved = {}) {
    check_finite(value, op);
    Node n;
    n.value = std::move(value);
    n.saved = std::move(saved);
    for (auto i : inputs) n.requires_grad = n.requires_grad || nodes_.at(i).requires_grad;
    n.inputs = std::move(inputs);
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Node& node(std::size_t id) { return nodes_.at(id); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of `id`, zero-initialised on first use.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  /// Reverse sweep from a scalar loss. Gradients accumulate into node grads.
  void backward(Var loss) {
    if (loss.tape() != this) throw std::invalid_argument("loss belongs to a different tape");
    const Tensor& lv = nodes_.at(loss.id()).value;
    if (lv.numel() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " + shape_str(lv.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor();
    grad_buffer(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  /// Gradient of a node after backward(); zeros when the loss does not reach it.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id());
    if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  void clear() noexcept { nodes_.clear(); }

 private:
  static void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw NonFiniteError(std::string("non-finite value in ") + op);
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->node(id_).value; }
inline bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (!a.valid() || a.tape() != b.tape()) throw std::invalid_argument("operands on different tapes");
  return *a.tape();
}

inline bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.begin(), tail.end(), full.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " expects a rank-2 operand, got " + shape_str(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m×k] · b[k×n]
inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(av.shape()) + " · " +
                     shape_str(bv.shape()));
  }
  Tensor out(Shape{m, n});
  kernels::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n, false);
  return tape.record("matmul", std::move(out), {a.id(), b.id()},
                     [m, k, n](Tape& t, std::size_t self) {
                       const auto& node = t.node(self);
                       const std::size_t ia = node.inputs[0], ib = node.inputs[1];
                       const double* g = node.grad.data().data();
                       if (t.needs_grad(ia)) {
                         kernels::gemm_nt(g, t.node(ib).value.data().data(),
                                          t.grad_buffer(ia).data().data(), m, n, k, true);
                       }
                       if (t.needs_grad(ib)) {
                         kernels::gemm_tn(t.node(ia).value.data().data(), g,
                                          t.grad_buffer(ib).data().data(), k, m, n, true);
                       }
                     });
}

// ---------------------------------------------------------------------------
// Elementwise

/// a + b where b has a's shape or a's trailing shape (broadcast over leading dims).
inline Var add(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!detail::is_suffix(av.shape(), bv.shape())) {
    throw ShapeError("add: cannot broadcast " + shape_str(bv.shape()) + " onto " +
                     shape_str(av.shape()));
  }
  const std::size_t inner = bv.numel();
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i % inner];
  return tape.record("add", std::move(out), {a.id(), b.id()}, [inner](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    const Tensor& g = node.grad;
    if (t.needs_grad(node.inputs[0])) {
      Tensor& ga = t.grad_buffer(node.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(node.inputs[1])) {
      Tensor& gb = t.grad_buffer(node.inputs[1]);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i % inner] += g[i];
    }
  });
}

/// Elementwise a ⊙ b, same broadcasting rule as add().
inline Var mul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!detail::is_suffix(av.shape(), bv.shape())) {
    throw ShapeError("mul: cannot broadcast " + shape_str(bv.shape()) + " onto " +
                     shape_str(av.shape()));
  }
  const std::size_t inner = bv.numel();
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i % inner];
  return tape.record("mul", std::move(out), {a.id(), b.id()}, [inner](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    const Tensor& g = node.grad;
    const Tensor& av = t.node(node.inputs[0]).value;
    const Tensor& bv = t.node(node.inputs[1]).value;
    if (t.needs_grad(node.inputs[0])) {
      Tensor& ga = t.grad_buffer(node.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i % inner];
    }
    if (t.needs_grad(node.inputs[1])) {
      Tensor& gb = t.grad_buffer(node.inputs[1]);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i % inner] += g[i] * av[i];
    }
  });
}

/// c · a for a constant c.
inline Var scale(const Var& a, double c) {
  Tape& tape = *a.tape();
  Tensor out = a.value();
  for (auto& v : out.data()) v *= c;
  return tape.record("scale", std::move(out), {a.id()}, [c](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    Tensor& ga = t.grad_buffer(node.inputs[0]);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += c * node.grad[i];
  });
}

/// s · a for a one-element Var s.
inline Var scale_by(const Var& a, const Var& s) {
  Tape& tape = detail::same_tape(a, s);
  if (s.value().numel() != 1) {
    throw ShapeError("scale_by expects a one-element scale, got " + shape_str(s.shape()));
  }
  const double c = s.value()[0];
  Tensor out = a.value();
  for (auto& v : out.data()) v *= c;
  return tape.record("scale_by", std::move(out), {a.id(), s.id()}, [](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    const Tensor& g = node.grad;
    const Tensor& av = t.node(node.inputs[0]).value;
    const double c = t.node(node.inputs[1]).value[0];
    if (t.needs_grad(node.inputs[0])) {
      Tensor& ga = t.grad_buffer(node.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
    }
    if (t.needs_grad(node.inputs[1])) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * av[i];
      t.grad_buffer(node.inputs[1])[0] += acc;
    }
  });
}

inline Var relu(const Var& a) {
  Tape& tape = *a.tape();
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return tape.record("relu", std::move(out), {a.id()}, [](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    const Tensor& x = t.node(node.inputs[0]).value;
    Tensor& ga = t.grad_buffer(node.inputs[0]);
    for (std::size_t i = 0; i < ga.numel(); ++i) {
      if (x[i] > 0.0) ga[i] += node.grad[i];
    }
  });
}

/// Exact GELU: x·Φ(x).
inline Var gelu(const Var& a) {
  Tape& tape = *a.tape();
  Tensor out = a.value();
  for (auto& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return tape.record("gelu", std::move(out), {a.id()}, [](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    const Tensor& x = t.node(node.inputs[0]).value;
    Tensor& ga = t.grad_buffer(node.inputs[0]);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < ga.numel(); ++i) {
      const double xi = x[i];
      const double cdf = 0.5 * (1.0 + std::erf(xi * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xi * xi);
      ga[i] += node.grad[i] * (cdf + xi * pdf);
    }
  });
}

/// Natural log. With floor > 0 computes log(max(x, floor)); the gradient is zero
/// where the floor is active. With floor == 0, non-positive input is rejected.
inline Var log(const Var& a, double floor = 0.0) {
  Tape& tape = *a.tape();
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::log(std::max(v, floor));
  return tape.record("log", std::move(out), {a.id()}, [floor](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    const Tensor& x = t.node(node.inputs[0]).value;
    Tensor& ga = t.grad_buffer(node.inputs[0]);
    for (std::size_t i = 0; i < ga.numel(); ++i) {
      if (x[i] > floor) ga[i] += node.grad[i] / x[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape

/// Softmax over the last axis, max-subtracted.
inline Var softmax(const Var& a) {
  Tape& tape = *a.tape();
  Tensor out = a.value();
  const std::size_t cols = out.cols(), rows = out.rows();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data().data() + r * cols;
    double mx = row[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      z += row[c];
    }
    for (std::size_t c = 0; c < cols; ++c) row[c] /= z;
  }
  return tape.record("softmax", std::move(out), {a.id()}, [rows, cols](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    const Tensor& y = node.value;
    const Tensor& g = node.grad;
    Tensor& ga = t.grad_buffer(node.inputs[0]);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[o + c] * y[o + c];
      for (std::size_t c = 0; c < cols; ++c) ga[o + c] += y[o + c] * (g[o + c] - dot);
    }
  });
}

/// Arithmetic mean along `axis`; the axis is removed (a rank-1 input yields shape [1]).
inline Var mean(const Var& a, std::size_t axis) {
  Tape& tape = *a.tape();
  const Tensor& av = a.value();
  if (axis >= av.rank()) {
    throw ShapeError("mean axis " + std::to_string(axis) + " out of range for " +
                     shape_str(av.shape()));
  }
  const Shape& s = av.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape os;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) os.push_back(s[i]);
  }
  if (os.empty()) os.push_back(1);
  Tensor out(os, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      const double* src = av.data().data() + (o * len + l) * inner;
      double* dst = out.data().data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(len);
  for (auto& v : out.data()) v *= inv;
  return tape.record("mean", std::move(out), {a.id()},
                     [outer, len, inner, inv](Tape& t, std::size_t self) {
                       const auto& node = t.node(self);
                       Tensor& ga = t.grad_buffer(node.inputs[0]);
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t l = 0; l < len; ++l) {
                           for (std::size_t i = 0; i < inner; ++i) {
                             ga[(o * len + l) * inner + i] += inv * node.grad[o * inner + i];
                           }
                         }
                       }
                     });
}

/// Sum of all elements, shape [1].
inline Var sum(const Var& a) {
  Tape& tape = *a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return tape.record("sum", Tensor::scalar(s), {a.id()}, [](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    const double g = node.grad[0];
    Tensor& ga = t.grad_buffer(node.inputs[0]);
    for (auto& v : ga.data()) v += g;
  });
}

inline Var reshape(const Var& a, Shape shape) {
  Tape& tape = *a.tape();
  Tensor out = a.value().reshaped(std::move(shape));
  return tape.record("reshape", std::move(out), {a.id()}, [](Tape& t, std::size_t self) {
    const auto& node = t.node(self);
    Tensor& ga = t.grad_buffer(node.inputs[0]);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += node.grad[i];
  });
}

/// Rows offset, offset+stride, ... of a rank-2 tensor: [(n·stride)×d] -> [n×d].
inline Var take_rows(const Var& a, std::size_t stride, std::size_t offset) {
  Tape& tape = *a.tape();
  const Tensor& av = a.value();
  detail::require_rank2(av, "take_rows");
  if (stride == 0 || offset >= stride || av.dim(0) % stride != 0) {
    throw ShapeError("take_rows: bad stride/offset for " + shape_str(av.shape()));
  }
  const std::size_t n = av.dim(0) / stride, d = av.dim(1);
  Tensor out(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(av.data().data() + (i * stride + offset) * d, d, out.data().data() + i * d);
  }
  return tape.record("take_rows", std::move(out), {a.id()},
                     [n, d, stride, offset](Tape& t, std::size_t self) {
                       const auto& node = t.node(self);
                       Tensor& ga = t.grad_buffer(node.inputs[0]);
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t j = 0; j < d; ++j) {
                           ga[(i * stride + offset) * d + j] += node.grad[i * d + j];
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Fused network primitives

/// Layer normalization over the last axis with population variance:
/// (x − mean) / sqrt(var + eps) · gamma + beta.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  Tape& tape = detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols(), rows = xv.rows();
  if (gamma.value().shape() != Shape{d} || beta.value().shape() != Shape{d}) {
    throw ShapeError("layer_norm: gamma/beta must have shape [" + std::to_string(d) + "], got " +
                     shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out(xv.shape());
  // saved: normalized values followed by one reciprocal std per row
  Tensor saved(Shape{xv.numel() + rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    if (!std::isfinite(rstd)) throw NonFiniteError("layer_norm: zero variance with eps == 0");
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xr[j] - mu) * rstd;
      saved[r * d + j] = xh;
      out[r * d + j] = xh * gv[j] + bv[j];
    }
    saved[xv.numel() + r] = rstd;
  }
  return tape.record(
      "layer_norm", std::move(out), {x.id(), gamma.id(), beta.id()},
      [rows, d](Tape& t, std::size_t self) {
        const auto& node = t.node(self);
        const Tensor& g = node.grad;
        const Tensor& s = node.saved;
        const std::size_t ix = node.inputs[0], ig = node.inputs[1], ib = node.inputs[2];
        if (t.needs_grad(ig) || t.needs_grad(ib)) {
          Tensor& gg = t.grad_buffer(ig);
          Tensor& gb = t.grad_buffer(ib);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += g[r * d + j] * s[r * d + j];
              gb[j] += g[r * d + j];
            }
          }
        }
        if (t.needs_grad(ix)) {
          const Tensor& gv = t.node(ig).value;
          Tensor& gx = t.grad_buffer(ix);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            const double rstd = s[rows * d + r];
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[r * d + j] * gv[j];
              m1 += gh;
              m2 += gh * s[r * d + j];
            }
            m1 *= inv_d;
            m2 *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[r * d + j] * gv[j];
              gx[r * d + j] += rstd * (gh - m1 - s[r * d + j] * m2);
            }
          }
        }
      },
      std::move(saved));
}

/// Multi-head scaled dot-product self-attention core.
/// qkv: [(n·tokens) × 3d] laid out as [Q | K | V] per row; returns [(n·tokens) × d]
/// with heads concatenated. Sequences never attend across each other.
inline Var attention(const Var& qkv, std::size_t n, std::size_t tokens, std::size_t heads) {
  Tape& tape = *qkv.tape();
  const Tensor& in = qkv.value();
  detail::require_rank2(in, "attention");
  if (heads == 0 || in.dim(0) != n * tokens || in.dim(1) % (3 * heads) != 0) {
    throw ShapeError("attention: qkv shape " + shape_str(in.shape()) + " incompatible with n=" +
                     std::to_string(n) + " tokens=" + std::to_string(tokens) +
                     " heads=" + std::to_string(heads));
  }
  const std::size_t d = in.dim(1) / 3, dh = d / heads, T = tokens;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out(Shape{n * T, d});
  Tensor probs(Shape{n * heads * T * T});
  const double* x = in.data().data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs.data().data() + (s * heads + h) * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        const double* q = x + (s * T + i) * 3 * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < T; ++j) {
          const double* k = x + (s * T + j) * 3 * d + d + h * dh;
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += q[c] * k[c];
          P[i * T + j] = dot * sc;
          mx = std::max(mx, P[i * T + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          P[i * T + j] = std::exp(P[i * T + j] - mx);
          z += P[i * T + j];
        }
        for (std::size_t j = 0; j < T; ++j) P[i * T + j] /= z;
        double* o = out.data().data() + (s * T + i) * d + h * dh;
        for (std::size_t j = 0; j < T; ++j) {
          const double p = P[i * T + j];
          const double* v = x + (s * T + j) * 3 * d + 2 * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) o[c] += p * v[c];
        }
      }
    }
  }
  return tape.record(
      "attention", std::move(out), {qkv.id()},
      [n, T, heads, d, dh, sc](Tape& t, std::size_t self) {
        const auto& node = t.node(self);
        const double* g = node.grad.data().data();
        const double* Pall = node.saved.data().data();
        const double* x = t.node(node.inputs[0]).value.data().data();
        double* gx = t.grad_buffer(node.inputs[0]).data().data();
        std::vector<double> dP(T * T);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* P = Pall + (s * heads + h) * T * T;
            // dP = dO · Vᵀ ; dV = Pᵀ · dO
            for (std::size_t i = 0; i < T; ++i) {
              const double* go = g + (s * T + i) * d + h * dh;
              for (std::size_t j = 0; j < T; ++j) {
                const double* v = x + (s * T + j) * 3 * d + 2 * d + h * dh;
                double* gv = gx + (s * T + j) * 3 * d + 2 * d + h * dh;
                double dot = 0.0;
                const double p = P[i * T + j];
                for (std::size_t c = 0; c < dh; ++c) {
                  dot += go[c] * v[c];
                  gv[c] += p * go[c];
                }
                dP[i * T + j] = dot;
              }
            }
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then through the scaled QKᵀ
            for (std::size_t i = 0; i < T; ++i) {
              double rs = 0.0;
              for (std::size_t j = 0; j < T; ++j) rs += dP[i * T + j] * P[i * T + j];
              const double* q = x + (s * T + i) * 3 * d + h * dh;
              double* gq = gx + (s * T + i) * 3 * d + h * dh;
              for (std::size_t j = 0; j < T; ++j) {
                const double ds = P[i * T + j] * (dP[i * T + j] - rs) * sc;
                const double* k = x + (s * T + j) * 3 * d + d + h * dh;
                double* gk = gx + (s * T + j) * 3 * d + d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                  gq[c] += ds * k[c];
                  gk[c] += ds * q[c];
                }
              }
            }
          }
        }
      },
      std::move(probs));
}

/// Builds transformer input tokens: per sequence, [cls + pos₀, patch₁ + pos₁, …].
/// patches: [(n·P)×d], cls: [d], pos: [(P+1)×d] -> [(n·(P+1))×d].
inline Var assemble_tokens(const Var& patches, const Var& cls, const Var& pos, std::size_t n) {
  Tape& tape = detail::same_tape(patches, cls);
  detail::same_tape(patches, pos);
  const Tensor& pv = patches.value();
  detail::require_rank2(pv, "assemble_tokens");
  const std::size_t d = pv.dim(1);
  if (n == 0 || pv.dim(0) % n != 0) throw ShapeError("assemble_tokens: rows not divisible by n");
  const std::size_t P = pv.dim(0) / n, T = P + 1;
  if (cls.value().shape() != Shape{d} || pos.value().shape() != Shape{T, d}) {
    throw ShapeError("assemble_tokens: cls/pos shapes " + shape_str(cls.shape()) + ", " +
                     shape_str(pos.shape()) + " do not match " + std::to_string(T) + " tokens of width " +
                     std::to_string(d));
  }
  const Tensor& cv = cls.value();
  const Tensor& qv = pos.value();
  Tensor out(Shape{n * T, d});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < d; ++j) out[(s * T) * d + j] = cv[j] + qv[j];
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t j = 0; j < d; ++j) {
        out[(s * T + 1 + p) * d + j] = pv[(s * P + p) * d + j] + qv[(1 + p) * d + j];
      }
    }
  }
  return tape.record("assemble_tokens", std::move(out), {patches.id(), cls.id(), pos.id()},
                     [n, P, T, d](Tape& t, std::size_t self) {
                       const auto& node = t.node(self);
                       const Tensor& g = node.grad;
                       const std::size_t ip = node.inputs[0], ic = node.inputs[1],
                                         iq = node.inputs[2];
                       if (t.needs_grad(ip)) {
                         Tensor& gp = t.grad_buffer(ip);
                         for (std::size_t s = 0; s < n; ++s) {
                           for (std::size_t p = 0; p < P; ++p) {
                             for (std::size_t j = 0; j < d; ++j) {
                               gp[(s * P + p) * d + j] += g[(s * T + 1 + p) * d + j];
                             }
                           }
                         }
                       }
                       if (t.needs_grad(ic)) {
                         Tensor& gc = t.grad_buffer(ic);
                         for (std::size_t s = 0; s < n; ++s) {
                           for (std::size_t j = 0; j < d; ++j) gc[j] += g[(s * T) * d + j];
                         }
                       }
                       if (t.needs_grad(iq)) {
                         Tensor& gq = t.grad_buffer(iq);
                         for (std::size_t s = 0; s < n; ++s) {
                           for (std::size_t k = 0; k < T * d; ++k) gq[k] += g[s * T * d + k];
                         }
                       }
                     });
}

/// Mean softmax cross-entropy of logits [n×K] against integer labels.
inline Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels) {
  Tape& tape = *logits.tape();
  const Tensor& lv = logits.value();
  detail::require_rank2(lv, "cross_entropy");
  const std::size_t n = lv.dim(0), K = lv.dim(1);
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  Tensor probs(lv.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= K) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[r]) +
                              " outside [0, " + std::to_string(K) + ")");
    }
    const double* row = lv.data().data() + r * K;
    double mx = row[0];
    for (std::size_t c = 1; c < K; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < K; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < K; ++c) probs[r * K + c] = std::exp(row[c] - lse);
    loss += lse - row[labels[r]];
  }
  loss /= static_cast<double>(n);
  return tape.record(
      "cross_entropy", Tensor::scalar(loss), {logits.id()},
      [labels, n, K](Tape& t, std::size_t self) {
        const auto& node = t.node(self);
        const double g = node.grad[0] / static_cast<double>(n);
        Tensor& gl = t.grad_buffer(node.inputs[0]);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < K; ++c) {
            const double y = c == labels[r] ? 1.0 : 0.0;
            gl[r * K + c] += g * (node.saved[r * K + c] - y);
          }
        }
      },
      std::move(probs));
}

}  // namespace ttacil::ag
