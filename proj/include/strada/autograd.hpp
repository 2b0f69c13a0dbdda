#pragma once

// Reverse-mode differentiation over matrices.
//
// A Tape records every op applied to its Vars together with a backward
// closure; Tape::backward replays the closures in reverse creation order.
// Ops whose inputs need no gradient record no closure, so the same code
// serves inference at little extra cost. The transformer blocks (RMSNorm,
// RoPE, causal attention, Student-t NLL) are fused ops with hand-derived
// backward passes.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "strada/tensor.hpp"

namespace strada {

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;

  Tape<T>* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(*this); }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), nullptr, false); }
  Var<T> variable(Tensor<T> value) { return push(std::move(value), nullptr, true); }
  // References `external` without copying; it must outlive the tape.
  Var<T> bind(const Tensor<T>& external, bool requires_grad) {
    return push(Tensor<T>{}, &external, requires_grad);
  }

  const Tensor<T>& value(Var<T> v) const { return node(v).value(); }
  bool requires_grad(Var<T> v) const { return node(v).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient accumulated into `v`, or nullptr when nothing reached it.
  const Tensor<T>* grad(Var<T> v) const {
    const auto& n = node(v);
    return n.grad ? &*n.grad : nullptr;
  }
  Tensor<T> grad_or_zero(Var<T> v) const {
    const auto* g = grad(v);
    return g ? *g : Tensor<T>(value(v).shape());
  }

  void backward(Var<T> loss) {
    if (loss.tape() != this) throw InputError("backward: variable belongs to another tape");
    const auto& out = node(loss);
    if (out.value().size() != 1) {
      throw InputError("backward: loss must be a scalar, got shape " +
                       shape_str(out.value().shape()));
    }
    for (auto& n : nodes_) n.grad.reset();
    nodes_[loss.id()].grad = Tensor<T>(out.value().shape(), T{1});
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && n.grad) n.backward(*this, *n.grad);
    }
  }

  // Op plumbing: registers an output computed from `inputs`.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || node(in).requires_grad;
    return push(std::move(value), nullptr, needs, needs ? std::move(backward) : Backward{});
  }

  // Gradient buffer of `v` (zero-initialized on first use), or nullptr when
  // `v` does not require a gradient.
  Tensor<T>* sink(Var<T> v) {
    auto& n = nodes_[v.id()];
    if (!n.requires_grad) return nullptr;
    if (!n.grad) n.grad = Tensor<T>(n.value().shape());
    return &*n.grad;
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    bool requires_grad = false;
    Backward backward;
    std::optional<Tensor<T>> grad;

    const Tensor<T>& value() const { return external ? *external : owned; }
  };

  Var<T> push(Tensor<T> value, const Tensor<T>* external, bool requires_grad,
              Backward backward = {}) {
    Node n;
    n.owned = std::move(value);
    n.external = external;
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Node& node(Var<T> v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw InputError("variable does not belong to this tape");
    }
    return nodes_[v.id()];
  }

  std::deque<Node> nodes_;
};

namespace ag {

namespace detail {

template <typename T>
Tape<T>& tape_of(Var<T> a, Var<T> b) {
  if (a.tape() != b.tape()) throw InputError("autograd: operands live on different tapes");
  return *a.tape();
}

template <typename T, typename F, typename D>
Var<T> unary(Var<T> a, F&& f, D&& dfdx) {
  Tape<T>& tape = *a.tape();
  const Tensor<T>& x = a.value();
  Tensor<T> out(x.shape(), uninitialized);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return tape.record(std::move(out), {a}, [a, dfdx](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.sink(a)) {
      const Tensor<T>& xv = t.value(a);
      for (std::size_t i = 0; i < xv.size(); ++i) (*ga)[i] += g[i] * dfdx(xv[i]);
    }
  });
}

}  // namespace detail

// a · b
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = detail::tape_of(a, b);
  Tensor<T> out = strada::matmul(a.value(), b.value());
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.sink(a)) ga->mat().noalias() += g.mat() * t.value(b).mat().transpose();
    if (auto* gb = t.sink(b)) gb->mat().noalias() += t.value(a).mat().transpose() * g.mat();
  });
}

// a · bᵀ, the layout of a linear layer with weights stored [out, in].
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  auto& tape = detail::tape_of(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1)) {
    throw DimensionError("matmul_nt: shape mismatch " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  }
  Tensor<T> out({av.dim(0), bv.dim(0)}, uninitialized);
  out.mat().noalias() = av.mat() * bv.mat().transpose();
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.sink(a)) ga->mat().noalias() += g.mat() * t.value(b).mat();
    if (auto* gb = t.sink(b)) gb->mat().noalias() += g.mat().transpose() * t.value(a).mat();
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = detail::tape_of(a, b);
  Tensor<T> out = strada::add(a.value(), b.value());
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.sink(a)) ga->mat() += g.mat();
    if (auto* gb = t.sink(b)) gb->mat() += g.mat();
  });
}

// Adds a length-n bias to every row of an m×n matrix.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> bias) {
  auto& tape = detail::tape_of(a, bias);
  const auto& av = a.value();
  const auto& bv = bias.value();
  if (av.rank() != 2 || bv.size() != av.dim(1)) {
    throw DimensionError("add_row: shape mismatch " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  }
  Tensor<T> out = av;
  out.mat().rowwise() += ConstMatrixMap<T>(bv.data().data(), 1, bv.size()).row(0);
  return tape.record(std::move(out), {a, bias}, [a, bias](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.sink(a)) ga->mat() += g.mat();
    if (auto* gb = t.sink(bias)) {
      MatrixMap<T>(gb->data().data(), 1, gb->size()).row(0) += g.mat().colwise().sum();
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tape = detail::tape_of(a, b);
  Tensor<T> out = strada::mul(a.value(), b.value());
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.sink(a)) {
      const auto& bv = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (auto* gb = t.sink(b)) {
      const auto& av = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  return detail::unary(
      a, [factor](T x) { return factor * x; }, [factor](T) { return factor; });
}

template <typename T>
Var<T> log(Var<T> a) {
  return detail::unary(
      a, [](T x) { return std::log(x); }, [](T x) { return T{1} / x; });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return detail::unary(
      a, [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

template <typename T>
Var<T> lgamma(Var<T> a) {
  return detail::unary(
      a, [](T x) { return log_gamma(x); }, [](T x) { return digamma(x); });
}

template <typename T>
Var<T> softplus(Var<T> a) {
  return detail::unary(
      a, [](T x) { return strada::softplus(x); }, [](T x) { return logistic(x); });
}

// x · logistic(x)
template <typename T>
Var<T> silu(Var<T> a) {
  const Tensor<T>& x = a.value();
  Tensor<T> out(x.shape(), uninitialized);
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const Eigen::Map<const Arr, Eigen::Aligned64> xa(x.data().data(), static_cast<Eigen::Index>(x.size()));
  Eigen::Map<Arr, Eigen::Aligned64>(out.data().data(), static_cast<Eigen::Index>(x.size())) =
      xa / (T{1} + (-xa).exp());
  return a.tape()->record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.sink(a)) {
      const Tensor<T>& xv = t.value(a);
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const T s = logistic(xv[i]);
        (*ga)[i] += g[i] * s * (T{1} + xv[i] * (T{1} - s));
      }
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  Tensor<T> out = strada::transpose(a.value());
  return a.tape()->record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.sink(a)) ga->mat() += g.mat().transpose();
  });
}

template <typename T>
Var<T> slice(Var<T> a, std::size_t begin, std::size_t end) {
  Tensor<T> out = strada::slice(a.value(), begin, end);
  return a.tape()->record(std::move(out), {a}, [a, begin](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.sink(a)) {
      const std::size_t offset = begin * (ga->size() / std::max<std::size_t>(ga->dim(0), 1));
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[offset + i] += g[i];
    }
  });
}

template <typename T>
Var<T> concat(Var<T> a, Var<T> b, std::size_t axis) {
  auto& tape = detail::tape_of(a, b);
  Tensor<T> out = strada::concat(a.value(), b.value(), axis);
  return tape.record(std::move(out), {a, b}, [a, b, axis](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(a);
    if (axis == 0) {
      if (auto* ga = t.sink(a)) ga->mat() += g.mat().topRows(av.dim(0));
      if (auto* gb = t.sink(b)) gb->mat() += g.mat().bottomRows(g.dim(0) - av.dim(0));
    } else {
      if (auto* ga = t.sink(a)) ga->mat() += g.mat().leftCols(av.dim(1));
      if (auto* gb = t.sink(b)) gb->mat() += g.mat().rightCols(g.dim(1) - av.dim(1));
    }
  });
}

// Softmax over the last axis.
template <typename T>
Var<T> softmax(Var<T> a) {
  Tensor<T> out = strada::softmax(a.value());
  return a.tape()->record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    auto* ga = t.sink(a);
    if (!ga) return;
    const Tensor<T> y = strada::softmax(t.value(a));
    const std::size_t width = y.shape().back();
    for (std::size_t base = 0; base < y.size(); base += width) {
      T dot = 0;
      for (std::size_t j = 0; j < width; ++j) dot += g[base + j] * y[base + j];
      for (std::size_t j = 0; j < width; ++j) (*ga)[base + j] += y[base + j] * (g[base + j] - dot);
    }
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T x : a.value().data()) s += x;
  return a.tape()->record(Tensor<T>({1, 1}, s), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    if (auto* ga = t.sink(a)) {
      for (auto& x : ga->data()) x += g[0];
    }
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const auto n = a.value().size();
  if (n == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(n));
}

// Row-wise RMSNorm: x · gain / sqrt(mean(x²) + eps).
template <typename T>
Var<T> rmsnorm(Var<T> x, Var<T> gain, T eps) {
  auto& tape = detail::tape_of(x, gain);
  const auto& xv = x.value();
  const auto& gv = gain.value();
  if (xv.rank() != 2 || gv.size() != xv.dim(1)) {
    throw DimensionError("rmsnorm: shape mismatch " + shape_str(xv.shape()) + " vs " +
                         shape_str(gv.shape()));
  }
  const std::size_t rows = xv.dim(0);
  const std::size_t d = xv.dim(1);
  Tensor<T> out(xv.shape(), uninitialized);
  std::vector<T> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto xr = xv.row(r);
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const T s = T{1} / std::sqrt(ss / static_cast<T>(d) + eps);
    inv_rms[r] = s;
    auto yr = out.row(r);
    for (std::size_t j = 0; j < d; ++j) yr[j] = xr[j] * s * gv[j];
  }
  return tape.record(
      std::move(out), {x, gain},
      [x, gain, inv_rms = std::move(inv_rms)](Tape<T>& t, const Tensor<T>& g) {
        const auto& xv = t.value(x);
        const auto& gv = t.value(gain);
        const std::size_t d = xv.dim(1);
        auto* gx = t.sink(x);
        auto* gg = t.sink(gain);
        for (std::size_t r = 0; r < xv.dim(0); ++r) {
          auto xr = xv.row(r);
          auto gr = g.row(r);
          const T s = inv_rms[r];
          if (gg) {
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += gr[j] * xr[j] * s;
          }
          if (gx) {
            T dot = 0;
            for (std::size_t j = 0; j < d; ++j) dot += gr[j] * gv[j] * xr[j];
            const T c = s * s * s * dot / static_cast<T>(d);
            auto out = gx->row(r);
            for (std::size_t j = 0; j < d; ++j) out[j] += gr[j] * gv[j] * s - c * xr[j];
          }
        }
      });
}

// Rotary table: cos/sin of position·θ_i, θ_i = base^(-2i/head_dim).
template <typename T>
struct RopeTable {
  std::size_t seq_len = 0;
  std::size_t half = 0;
  std::vector<T> cos;
  std::vector<T> sin;

  RopeTable(std::size_t seq_len_, std::size_t head_dim, double base)
      : seq_len(seq_len_), half(head_dim / 2), cos(seq_len_ * half), sin(seq_len_ * half) {
    for (std::size_t p = 0; p < seq_len; ++p) {
      for (std::size_t i = 0; i < half; ++i) {
        const double theta =
            std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double angle = static_cast<double>(p) * theta;
        cos[p * half + i] = static_cast<T>(std::cos(angle));
        sin[p * half + i] = static_cast<T>(std::sin(angle));
      }
    }
  }
};

namespace detail {

// Rotates each head's (2i, 2i+1) pairs; row r sits at position r % seq_len.
// direction = -1 applies the inverse rotation.
template <typename T>
void rope_apply(const Tensor<T>& in, Tensor<T>& out, const RopeTable<T>& table,
                std::size_t head_dim, int direction, bool accumulate) {
  const std::size_t d = in.dim(1);
  const std::size_t heads = d / head_dim;
  for (std::size_t r = 0; r < in.dim(0); ++r) {
    const std::size_t p = r % table.seq_len;
    auto src = in.row(r);
    auto dst = out.row(r);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < table.half; ++i) {
        const std::size_t j = h * head_dim + 2 * i;
        const T c = table.cos[p * table.half + i];
        const T s = direction > 0 ? table.sin[p * table.half + i] : -table.sin[p * table.half + i];
        const T a = src[j];
        const T b = src[j + 1];
        const T ra = a * c - b * s;
        const T rb = a * s + b * c;
        if (accumulate) {
          dst[j] += ra;
          dst[j + 1] += rb;
        } else {
          dst[j] = ra;
          dst[j + 1] = rb;
        }
      }
    }
  }
}

}  // namespace detail

// Rotary position embedding on a (sequences·seq_len) × (heads·head_dim) matrix.
template <typename T>
Var<T> rope(Var<T> x, std::size_t seq_len, std::size_t head_dim, double base) {
  const auto& xv = x.value();
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw ConfigError("rope: head_dim must be even and positive, got " + std::to_string(head_dim));
  }
  if (xv.rank() != 2 || xv.dim(1) % head_dim != 0 || seq_len == 0 || xv.dim(0) % seq_len != 0) {
    throw DimensionError("rope: shape " + shape_str(xv.shape()) + " incompatible with seq_len " +
                         std::to_string(seq_len) + " and head_dim " + std::to_string(head_dim));
  }
  auto table = std::make_shared<RopeTable<T>>(seq_len, head_dim, base);
  Tensor<T> out(xv.shape(), uninitialized);
  detail::rope_apply(xv, out, *table, head_dim, +1, false);
  return x.tape()->record(std::move(out), {x},
                          [x, table, head_dim](Tape<T>& t, const Tensor<T>& g) {
                            if (auto* gx = t.sink(x)) {
                              detail::rope_apply(g, *gx, *table, head_dim, -1, true);
                            }
                          });
}

// Multi-head causal self-attention core: softmax(q kᵀ / √head_dim, masked) v,
// computed independently per sequence of seq_len rows and per head. q and k
// are expected to be rotary-encoded already.
template <typename T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t seq_len, std::size_t n_heads) {
  auto& tape = detail::tape_of(q, k);
  detail::tape_of(q, v);
  const auto& qv = q.value();
  if (qv.rank() != 2 || qv.shape() != k.value().shape() || qv.shape() != v.value().shape()) {
    throw DimensionError("causal_attention: shape mismatch " + shape_str(qv.shape()) + " vs " +
                         shape_str(k.value().shape()) + " vs " + shape_str(v.value().shape()));
  }
  if (n_heads == 0 || qv.dim(1) % n_heads != 0 || seq_len == 0 || qv.dim(0) % seq_len != 0) {
    throw DimensionError("causal_attention: shape " + shape_str(qv.shape()) +
                         " incompatible with seq_len " + std::to_string(seq_len) + " and " +
                         std::to_string(n_heads) + " heads");
  }
  const std::size_t hd = qv.dim(1) / n_heads;
  const std::size_t n_seq = qv.dim(0) / seq_len;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(hd));
  const auto qm = qv.mat();
  const auto km = k.value().mat();
  const auto vm = v.value().mat();

  Tensor<T> out(qv.shape(), uninitialized);
  auto om = out.mat();
  const bool keep = q.requires_grad() || k.requires_grad() || v.requires_grad();
  auto probs = std::make_shared<std::vector<RowMatrix<T>>>(keep ? n_seq * n_heads : 0);
  RowMatrix<T> scores(seq_len, seq_len);
  RowMatrix<T> scratch;
  for (std::size_t b = 0; b < n_seq; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const auto qb = qm.block(b * seq_len, h * hd, seq_len, hd);
      const auto kb = km.block(b * seq_len, h * hd, seq_len, hd);
      const auto vb = vm.block(b * seq_len, h * hd, seq_len, hd);
      scores.noalias() = qb * kb.transpose();
      RowMatrix<T>& p = keep ? (*probs)[b * n_heads + h] : scratch;
      p.setZero(seq_len, seq_len);
      for (std::size_t i = 0; i < seq_len; ++i) {
        T hi = scores(i, 0) * inv_sqrt;
        for (std::size_t j = 1; j <= i; ++j) hi = std::max(hi, scores(i, j) * inv_sqrt);
        T total = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          const T e = std::exp(scores(i, j) * inv_sqrt - hi);
          p(i, j) = e;
          total += e;
        }
        for (std::size_t j = 0; j <= i; ++j) p(i, j) /= total;
      }
      om.block(b * seq_len, h * hd, seq_len, hd).noalias() =
          p.template triangularView<Eigen::Lower>() * vb;
    }
  }

  return tape.record(
      std::move(out), {q, k, v},
      [q, k, v, seq_len, n_heads, hd, n_seq, inv_sqrt, probs](Tape<T>& t, const Tensor<T>& g) {
        auto* gq = t.sink(q);
        auto* gk = t.sink(k);
        auto* gv = t.sink(v);
        const auto qm = t.value(q).mat();
        const auto km = t.value(k).mat();
        const auto vm = t.value(v).mat();
        const auto gm = g.mat();
        RowMatrix<T> dp(seq_len, seq_len);
        RowMatrix<T> ds(seq_len, seq_len);
        for (std::size_t b = 0; b < n_seq; ++b) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            const RowMatrix<T>& p = (*probs)[b * n_heads + h];
            const auto go = gm.block(b * seq_len, h * hd, seq_len, hd);
            const auto vb = vm.block(b * seq_len, h * hd, seq_len, hd);
            if (gv) gv->mat().block(b * seq_len, h * hd, seq_len, hd).noalias() += p.transpose() * go;
            if (!gq && !gk) continue;
            dp.noalias() = go * vb.transpose();
            ds.setZero();
            for (std::size_t i = 0; i < seq_len; ++i) {
              T dot = 0;
              for (std::size_t j = 0; j <= i; ++j) dot += p(i, j) * dp(i, j);
              for (std::size_t j = 0; j <= i; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * inv_sqrt;
            }
            if (gq) {
              gq->mat().block(b * seq_len, h * hd, seq_len, hd).noalias() +=
                  ds * km.block(b * seq_len, h * hd, seq_len, hd);
            }
            if (gk) {
              gk->mat().block(b * seq_len, h * hd, seq_len, hd).noalias() +=
                  ds.transpose() * qm.block(b * seq_len, h * hd, seq_len, hd);
            }
          }
        }
      });
}

// Student-t head transform shared by the model and the loss.
template <typename T>
struct StudentTHead {
  T nu_floor = T(1e-3);   // plus an optional +2 for finite variance
  T sigma_floor = T(1e-4);

  T nu(T a) const { return strada::softplus(a) + nu_floor; }
  T mu(T a) const { return a; }
  T sigma(T a) const { return strada::softplus(a) + sigma_floor; }
};

// −log pdf of the location-scale Student-t.
template <typename T>
T student_t_nll_value(T nu, T mu, T sigma, T y) {
  const T z = (y - mu) / sigma;
  constexpr T pi = std::numbers::pi_v<T>;
  return -log_gamma((nu + T{1}) / T{2}) + log_gamma(nu / T{2}) + T{0.5} * std::log(nu * pi) +
         std::log(sigma) + (nu + T{1}) / T{2} * std::log1p(z * z / nu);
}

// Mean Student-t NLL of `targets` under head pre-activations (rows × 3:
// raw ν, μ, raw σ).
template <typename T>
Var<T> student_t_nll(Var<T> head_out, std::span<const T> targets, StudentTHead<T> head = {}) {
  const auto& a = head_out.value();
  if (a.rank() != 2 || a.dim(1) != 3 || a.dim(0) != targets.size()) {
    throw DimensionError("student_t_nll: shape mismatch " + shape_str(a.shape()) + " vs [" +
                         std::to_string(targets.size()) + "]");
  }
  const std::size_t n = a.dim(0);
  if (n == 0) throw DimensionError("student_t_nll: empty batch");
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    total += student_t_nll_value(head.nu(a(r, 0)), head.mu(a(r, 1)), head.sigma(a(r, 2)),
                                 targets[r]);
  }
  std::vector<T> y(targets.begin(), targets.end());
  return head_out.tape()->record(
      Tensor<T>({1, 1}, total / static_cast<T>(n)), {head_out},
      [head_out, y = std::move(y), head](Tape<T>& t, const Tensor<T>& g) {
        auto* ga = t.sink(head_out);
        if (!ga) return;
        const auto& a = t.value(head_out);
        const T w = g[0] / static_cast<T>(y.size());
        for (std::size_t r = 0; r < y.size(); ++r) {
          const T nu = head.nu(a(r, 0));
          const T sigma = head.sigma(a(r, 2));
          const T z = (y[r] - head.mu(a(r, 1))) / sigma;
          const T z2 = z * z;
          const T denom = nu + z2;
          const T d_nu = T{0.5} * (digamma(nu / T{2}) - digamma((nu + T{1}) / T{2})) +
                         T{1} / (T{2} * nu) + T{0.5} * std::log1p(z2 / nu) -
                         (nu + T{1}) * z2 / (T{2} * nu * denom);
          const T d_mu = -(nu + T{1}) * z / (sigma * denom);
          const T d_sigma = T{1} / sigma - (nu + T{1}) * z2 / (sigma * denom);
          (*ga)(r, 0) += w * d_nu * logistic(a(r, 0));
          (*ga)(r, 1) += w * d_mu;
          (*ga)(r, 2) += w * d_sigma * logistic(a(r, 2));
        }
      });
}

}  // namespace ag

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) {
  return ag::add(a, b);
}
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) {
  return ag::mul(a, b);
}

// Gradients of a scalar loss with respect to `params`. `loss_fn` receives
// the tape and one Var per parameter and returns the loss Var.
template <typename T, typename LossFn>
std::vector<Tensor<T>> gradient(LossFn&& loss_fn, const std::vector<Tensor<T>>& params) {
  Tape<T> tape;
  std::vector<Var<T>> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.bind(p, true));
  Var<T> loss = loss_fn(tape, std::span<const Var<T>>(vars));
  tape.backward(loss);
  std::vector<Tensor<T>> grads;
  grads.reserve(params.size());
  for (const auto& v : vars) grads.push_back(tape.grad_or_zero(v));
  return grads;
}

}  // namespace strada
