#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "evssl/common.hpp"

namespace evssl {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename S>
class Tape;

// Lightweight handle into a Tape. Copying is free; the tape owns all storage.
template <typename S>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape<S>* tape, int32_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr && id_ >= 0; }
  Tape<S>* tape() const { return tape_; }
  int32_t id() const { return id_; }

  const Shape& shape() const;
  int64_t numel() const;
  int64_t rows() const;
  int64_t cols() const;
  std::span<const S> value() const;
  S scalar() const;
  // Empty span if backward never reached this node.
  std::span<const S> grad() const;
  std::vector<S> grad_or_zero() const;
  bool requires_grad() const;

 private:
  Tape<S>* tape_ = nullptr;
  int32_t id_ = -1;
};

// Tape of operations. Nodes are appended in execution order, which is a
// topological order by construction; backward walks them in reverse. The tape
// is rebuilt from scratch every training step.
template <typename S>
class Tape {
 public:
  struct Node {
    const char* op = "leaf";
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // allocated on first touch during backward
    bool needs_grad = false;
    std::function<void(Tape&, int32_t)> backward;  // (tape, own id)
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void clear() { nodes_.clear(); }
  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }

  // With gradients disabled, emitted nodes carry no closures and never
  // require grad; used for teacher forward passes.
  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  bool finite_checks() const { return finite_checks_; }
  void set_finite_checks(bool on) { finite_checks_ = on; }

  Node& node(int32_t id) { return nodes_.at(static_cast<size_t>(id)); }
  const Node& node(int32_t id) const { return nodes_.at(static_cast<size_t>(id)); }

  Tensor<S> leaf(Shape shape, std::vector<S> value, bool requires_grad,
                 const char* name = "leaf") {
    require(shape_numel(shape) == static_cast<int64_t>(value.size()),
            ErrorKind::Usage,
            cat("leaf '", name, "': shape ", shape_str(shape), " does not match ",
                value.size(), " values"));
    check_finite(name, value);
    Node n;
    n.op = name;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.needs_grad = requires_grad && grad_enabled_;
    nodes_.push_back(std::move(n));
    return Tensor<S>(this, static_cast<int32_t>(nodes_.size() - 1));
  }

  Tensor<S> leaf(Shape shape, std::span<const S> value, bool requires_grad,
                 const char* name = "leaf") {
    return leaf(std::move(shape), std::vector<S>(value.begin(), value.end()),
                requires_grad, name);
  }

  // Append an op node. Inputs are listed for needs_grad propagation only;
  // closures capture the ids they need.
  Tensor<S> emit(const char* op, Shape shape, std::vector<S> value,
                 std::initializer_list<int32_t> inputs,
                 std::function<void(Tape&, int32_t)> backward) {
    check_finite(op, value);
    Node n;
    n.op = op;
    n.shape = std::move(shape);
    n.value = std::move(value);
    if (grad_enabled_) {
      for (int32_t in : inputs) {
        if (node(in).needs_grad) {
          n.needs_grad = true;
          break;
        }
      }
    }
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Tensor<S>(this, static_cast<int32_t>(nodes_.size() - 1));
  }

  // Clears all gradients, seeds d(loss)/d(loss) = 1, then sweeps the tape in
  // reverse creation order. Calling backward twice therefore recomputes
  // rather than accumulates.
  void backward(const Tensor<S>& loss) {
    require(loss.valid() && loss.tape() == this, ErrorKind::Usage,
            "backward: loss tensor is not on this tape");
    const Node& ln = node(loss.id());
    require(shape_numel(ln.shape) == 1, ErrorKind::Usage,
            cat("backward: loss must be scalar, got ", shape_str(ln.shape)));
    require(ln.needs_grad, ErrorKind::Usage,
            "backward: loss does not depend on any tensor that requires grad");
    for (Node& n : nodes_) n.grad.clear();
    grad_buffer(loss.id())[0] = S(1);
    for (int32_t i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  S* grad_buffer(int32_t id) {
    Node& n = node(id);
    if (n.grad.empty()) n.grad.assign(static_cast<size_t>(shape_numel(n.shape)), S(0));
    return n.grad.data();
  }

  void check_finite(const char* op, const std::vector<S>& v) const {
    if (!finite_checks_) return;
    for (const S& x : v) {
      if (!std::isfinite(static_cast<double>(x))) {
        throw_numeric(cat("non-finite value produced by op '", op, "'"));
      }
    }
  }

 private:
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool finite_checks_ = true;
};

template <typename S>
const Shape& Tensor<S>::shape() const {
  return tape_->node(id_).shape;
}
template <typename S>
int64_t Tensor<S>::numel() const {
  return shape_numel(shape());
}
template <typename S>
int64_t Tensor<S>::rows() const {
  const Shape& s = shape();
  require(s.size() == 2, ErrorKind::Usage, "rows: tensor is not rank-2");
  return s[0];
}
template <typename S>
int64_t Tensor<S>::cols() const {
  const Shape& s = shape();
  require(s.size() == 2, ErrorKind::Usage, "cols: tensor is not rank-2");
  return s[1];
}
template <typename S>
std::span<const S> Tensor<S>::value() const {
  return tape_->node(id_).value;
}
template <typename S>
S Tensor<S>::scalar() const {
  require(numel() == 1, ErrorKind::Usage, "scalar: tensor has more than one element");
  return tape_->node(id_).value[0];
}
template <typename S>
std::span<const S> Tensor<S>::grad() const {
  return tape_->node(id_).grad;
}
template <typename S>
std::vector<S> Tensor<S>::grad_or_zero() const {
  const auto& g = tape_->node(id_).grad;
  if (!g.empty()) return g;
  return std::vector<S>(static_cast<size_t>(numel()), S(0));
}
template <typename S>
bool Tensor<S>::requires_grad() const {
  return tape_->node(id_).needs_grad;
}

namespace detail {

template <typename S>
using CMat = Eigen::Map<
    const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using MMat =
    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C (+)= op_a(A[m x k]) * op_b(B[k x n]); A and B are the stored layouts.
template <typename S>
void gemm(S* c, const S* a, const S* b, int64_t m, int64_t k, int64_t n,
          bool ta, bool tb, bool accumulate) {
  CMat<S> A(a, ta ? k : m, ta ? m : k);
  CMat<S> B(b, tb ? n : k, tb ? k : n);
  MMat<S> C(c, m, n);
  if (accumulate) {
    if (!ta && !tb) C.noalias() += A * B;
    else if (ta && !tb) C.noalias() += A.transpose() * B;
    else if (!ta && tb) C.noalias() += A * B.transpose();
    else C.noalias() += A.transpose() * B.transpose();
  } else {
    if (!ta && !tb) C.noalias() = A * B;
    else if (ta && !tb) C.noalias() = A.transpose() * B;
    else if (!ta && tb) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
}

template <typename S>
Tape<S>* same_tape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  require(a.valid() && b.valid(), ErrorKind::Usage, cat(op, ": invalid tensor handle"));
  require(a.tape() == b.tape(), ErrorKind::Usage,
          cat(op, ": operands live on different tapes"));
  return a.tape();
}

inline void require_rank2(const Shape& s, const char* op) {
  require(s.size() == 2, ErrorKind::Usage,
          cat(op, ": expected rank-2 tensor, got ", shape_str(s)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(Tensor<S> a, Tensor<S> b, bool ta = false, bool tb = false) {
  Tape<S>& tp = *detail::same_tape(a, b, "matmul");
  const Shape sa = tp.node(a.id()).shape;
  const Shape sb = tp.node(b.id()).shape;
  detail::require_rank2(sa, "matmul");
  detail::require_rank2(sb, "matmul");
  const int64_t m = ta ? sa[1] : sa[0];
  const int64_t k = ta ? sa[0] : sa[1];
  const int64_t k2 = tb ? sb[1] : sb[0];
  const int64_t n = tb ? sb[0] : sb[1];
  require(k == k2, ErrorKind::Usage,
          cat("matmul: inner dimensions disagree, ", shape_str(sa), (ta ? "^T" : ""),
              " * ", shape_str(sb), (tb ? "^T" : "")));
  std::vector<S> out(static_cast<size_t>(m * n));
  detail::gemm(out.data(), tp.node(a.id()).value.data(), tp.node(b.id()).value.data(),
               m, k, n, ta, tb, false);
  const int32_t aid = a.id(), bid = b.id();
  return tp.emit(
      "matmul", {m, n}, std::move(out), {aid, bid},
      [aid, bid, m, k, n, ta, tb](Tape<S>& t, int32_t self) {
        const S* g = t.node(self).grad.data();
        const S* av = t.node(aid).value.data();
        const S* bv = t.node(bid).value.data();
        if (t.node(aid).needs_grad) {
          S* da = t.grad_buffer(aid);
          if (!ta && !tb) detail::gemm(da, g, bv, m, n, k, false, true, true);
          else if (ta && !tb) detail::gemm(da, bv, g, k, n, m, false, true, true);
          else if (!ta && tb) detail::gemm(da, g, bv, m, n, k, false, false, true);
          else detail::gemm(da, bv, g, k, n, m, true, true, true);
        }
        if (t.node(bid).needs_grad) {
          S* db = t.grad_buffer(bid);
          if (!ta && !tb) detail::gemm(db, av, g, k, m, n, true, false, true);
          else if (ta && !tb) detail::gemm(db, av, g, k, m, n, false, false, true);
          else if (!ta && tb) detail::gemm(db, g, av, n, m, k, true, false, true);
          else detail::gemm(db, g, av, n, m, k, true, true, true);
        }
      });
}

// Elementwise sum; b may also be a row vector ([n] or [1,n]) added to every
// row of a rank-2 a.
template <typename S>
Tensor<S> add(Tensor<S> a, Tensor<S> b) {
  Tape<S>& tp = *detail::same_tape(a, b, "add");
  const Shape sa = tp.node(a.id()).shape;
  const Shape sb = tp.node(b.id()).shape;
  const int64_t na = shape_numel(sa), nb = shape_numel(sb);
  const bool same = sa == sb;
  const bool rowcast = !same && sa.size() == 2 &&
                       (sb.size() == 1 || (sb.size() == 2 && sb[0] == 1)) &&
                       sa[1] == nb;
  require(same || rowcast, ErrorKind::Usage,
          cat("add: incompatible shapes ", shape_str(sa), " and ", shape_str(sb)));
  std::vector<S> out(tp.node(a.id()).value);
  const S* bv = tp.node(b.id()).value.data();
  if (same) {
    for (int64_t i = 0; i < na; ++i) out[static_cast<size_t>(i)] += bv[i];
  } else {
    const int64_t rows = sa[0], cols = sa[1];
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < cols; ++c) out[static_cast<size_t>(r * cols + c)] += bv[c];
  }
  const int32_t aid = a.id(), bid = b.id();
  return tp.emit(
      "add", sa, std::move(out), {aid, bid},
      [aid, bid, same, sa](Tape<S>& t, int32_t self) {
        const S* g = t.node(self).grad.data();
        const int64_t n = shape_numel(sa);
        if (t.node(aid).needs_grad) {
          S* da = t.grad_buffer(aid);
          for (int64_t i = 0; i < n; ++i) da[i] += g[i];
        }
        if (t.node(bid).needs_grad) {
          S* db = t.grad_buffer(bid);
          if (same) {
            for (int64_t i = 0; i < n; ++i) db[i] += g[i];
          } else {
            const int64_t rows = sa[0], cols = sa[1];
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t c = 0; c < cols; ++c) db[c] += g[r * cols + c];
          }
        }
      });
}

template <typename S>
Tensor<S> mul(Tensor<S> a, Tensor<S> b) {
  Tape<S>& tp = *detail::same_tape(a, b, "mul");
  const Shape sa = tp.node(a.id()).shape;
  require(sa == tp.node(b.id()).shape, ErrorKind::Usage,
          cat("mul: shapes differ, ", shape_str(sa), " vs ",
              shape_str(tp.node(b.id()).shape)));
  const int64_t n = shape_numel(sa);
  std::vector<S> out(static_cast<size_t>(n));
  const S* av = tp.node(a.id()).value.data();
  const S* bv = tp.node(b.id()).value.data();
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = av[i] * bv[i];
  const int32_t aid = a.id(), bid = b.id();
  return tp.emit("mul", sa, std::move(out), {aid, bid},
                 [aid, bid, n](Tape<S>& t, int32_t self) {
                   const S* g = t.node(self).grad.data();
                   if (t.node(aid).needs_grad) {
                     S* da = t.grad_buffer(aid);
                     const S* bv2 = t.node(bid).value.data();
                     for (int64_t i = 0; i < n; ++i) da[i] += g[i] * bv2[i];
                   }
                   if (t.node(bid).needs_grad) {
                     S* db = t.grad_buffer(bid);
                     const S* av2 = t.node(aid).value.data();
                     for (int64_t i = 0; i < n; ++i) db[i] += g[i] * av2[i];
                   }
                 });
}

template <typename S>
Tensor<S> scale(Tensor<S> a, double alpha) {
  require(a.valid(), ErrorKind::Usage, "scale: invalid tensor handle");
  Tape<S>& tp = *a.tape();
  const Shape sa = tp.node(a.id()).shape;
  const int64_t n = shape_numel(sa);
  std::vector<S> out(static_cast<size_t>(n));
  const S* av = tp.node(a.id()).value.data();
  const S al = static_cast<S>(alpha);
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = al * av[i];
  const int32_t aid = a.id();
  return tp.emit("scale", sa, std::move(out), {aid},
                 [aid, al, n](Tape<S>& t, int32_t self) {
                   if (!t.node(aid).needs_grad) return;
                   const S* g = t.node(self).grad.data();
                   S* da = t.grad_buffer(aid);
                   for (int64_t i = 0; i < n; ++i) da[i] += al * g[i];
                 });
}

namespace detail {

struct SliceIter {
  int64_t count, len, base_step, stride;
};

// Slices along `axis` of a rank-1 or rank-2 shape, row-major storage.
inline SliceIter slice_iter(const Shape& s, int axis, const char* op) {
  if (s.size() == 1) {
    require(axis == 0, ErrorKind::Usage, cat(op, ": axis ", axis, " invalid for rank-1"));
    return {1, s[0], 0, 1};
  }
  require_rank2(s, op);
  require(axis == 0 || axis == 1, ErrorKind::Usage,
          cat(op, ": axis ", axis, " invalid for rank-2"));
  if (axis == 1) return {s[0], s[1], s[1], 1};  // rows
  return {s[1], s[0], 1, s[1]};                 // columns
}

}  // namespace detail

// Softmax along `axis` with temperature: softmax(x / temperature).
template <typename S>
Tensor<S> softmax(Tensor<S> a, int axis, double temperature) {
  require(a.valid(), ErrorKind::Usage, "softmax: invalid tensor handle");
  require(std::isfinite(temperature) && temperature > 0.0, ErrorKind::Usage,
          cat("softmax: temperature must be positive, got ", temperature));
  Tape<S>& tp = *a.tape();
  const Shape sa = tp.node(a.id()).shape;
  const auto it = detail::slice_iter(sa, axis, "softmax");
  const S* av = tp.node(a.id()).value.data();
  std::vector<S> out(static_cast<size_t>(shape_numel(sa)));
  for (int64_t s = 0; s < it.count; ++s) {
    const int64_t base = s * it.base_step;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < it.len; ++j)
      mx = std::max(mx, static_cast<double>(av[base + j * it.stride]) / temperature);
    double denom = 0.0;
    for (int64_t j = 0; j < it.len; ++j) {
      const double e =
          std::exp(static_cast<double>(av[base + j * it.stride]) / temperature - mx);
      out[static_cast<size_t>(base + j * it.stride)] = static_cast<S>(e);
      denom += e;
    }
    for (int64_t j = 0; j < it.len; ++j) {
      auto& o = out[static_cast<size_t>(base + j * it.stride)];
      o = static_cast<S>(static_cast<double>(o) / denom);
    }
  }
  const int32_t aid = a.id();
  return tp.emit(
      "softmax", sa, std::move(out), {aid},
      [aid, it, temperature](Tape<S>& t, int32_t self) {
        if (!t.node(aid).needs_grad) return;
        const S* g = t.node(self).grad.data();
        const S* y = t.node(self).value.data();
        S* da = t.grad_buffer(aid);
        for (int64_t s = 0; s < it.count; ++s) {
          const int64_t base = s * it.base_step;
          double dot = 0.0;
          for (int64_t j = 0; j < it.len; ++j) {
            const int64_t idx = base + j * it.stride;
            dot += static_cast<double>(g[idx]) * static_cast<double>(y[idx]);
          }
          for (int64_t j = 0; j < it.len; ++j) {
            const int64_t idx = base + j * it.stride;
            da[idx] += static_cast<S>(static_cast<double>(y[idx]) *
                                      (static_cast<double>(g[idx]) - dot) / temperature);
          }
        }
      });
}

// Natural log; defined only for strictly positive inputs.
template <typename S>
Tensor<S> log(Tensor<S> a) {
  require(a.valid(), ErrorKind::Usage, "log: invalid tensor handle");
  Tape<S>& tp = *a.tape();
  const Shape sa = tp.node(a.id()).shape;
  const int64_t n = shape_numel(sa);
  const S* av = tp.node(a.id()).value.data();
  std::vector<S> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    require(av[i] > S(0), ErrorKind::Numeric, "log: input must be strictly positive");
    out[static_cast<size_t>(i)] = std::log(av[i]);
  }
  const int32_t aid = a.id();
  return tp.emit("log", sa, std::move(out), {aid},
                 [aid, n](Tape<S>& t, int32_t self) {
                   if (!t.node(aid).needs_grad) return;
                   const S* g = t.node(self).grad.data();
                   const S* x = t.node(aid).value.data();
                   S* da = t.grad_buffer(aid);
                   for (int64_t i = 0; i < n; ++i) da[i] += g[i] / x[i];
                 });
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
template <typename S>
Tensor<S> gelu(Tensor<S> a) {
  require(a.valid(), ErrorKind::Usage, "gelu: invalid tensor handle");
  Tape<S>& tp = *a.tape();
  const Shape sa = tp.node(a.id()).shape;
  const int64_t n = shape_numel(sa);
  const S* av = tp.node(a.id()).value.data();
  std::vector<S> out(static_cast<size_t>(n));
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (int64_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(av[i]);
    out[static_cast<size_t>(i)] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
  }
  const int32_t aid = a.id();
  return tp.emit(
      "gelu", sa, std::move(out), {aid},
      [aid, n](Tape<S>& t, int32_t self) {
        if (!t.node(aid).needs_grad) return;
        const S* g = t.node(self).grad.data();
        const S* x = t.node(aid).value.data();
        S* da = t.grad_buffer(aid);
        constexpr double kInvSqrt2 = 0.70710678118654752440;
        constexpr double kInvSqrt2Pi = 0.39894228040143267794;
        for (int64_t i = 0; i < n; ++i) {
          const double xi = static_cast<double>(x[i]);
          const double d = 0.5 * (1.0 + std::erf(xi * kInvSqrt2)) +
                           xi * kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
          da[i] += static_cast<S>(static_cast<double>(g[i]) * d);
        }
      });
}

// Row-wise layer normalization with learned gain/bias ([n] or [1,n]).
template <typename S>
Tensor<S> layernorm(Tensor<S> x, Tensor<S> gamma, Tensor<S> beta, double eps = 1e-5) {
  Tape<S>& tp = *detail::same_tape(x, gamma, "layernorm");
  detail::same_tape(x, beta, "layernorm");
  const Shape sx = tp.node(x.id()).shape;
  detail::require_rank2(sx, "layernorm");
  const int64_t m = sx[0], n = sx[1];
  require(shape_numel(tp.node(gamma.id()).shape) == n &&
              shape_numel(tp.node(beta.id()).shape) == n,
          ErrorKind::Usage, "layernorm: gain/bias length must match row width");
  const S* xv = tp.node(x.id()).value.data();
  const S* gv = tp.node(gamma.id()).value.data();
  const S* bv = tp.node(beta.id()).value.data();
  std::vector<S> out(static_cast<size_t>(m * n));
  std::vector<S> xhat(static_cast<size_t>(m * n));
  std::vector<S> inv_std(static_cast<size_t>(m));
  for (int64_t r = 0; r < m; ++r) {
    double mean = 0.0;
    for (int64_t c = 0; c < n; ++c) mean += static_cast<double>(xv[r * n + c]);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t c = 0; c < n; ++c) {
      const double d = static_cast<double>(xv[r * n + c]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = static_cast<S>(is);
    for (int64_t c = 0; c < n; ++c) {
      const double xh = (static_cast<double>(xv[r * n + c]) - mean) * is;
      xhat[static_cast<size_t>(r * n + c)] = static_cast<S>(xh);
      out[static_cast<size_t>(r * n + c)] =
          static_cast<S>(xh * static_cast<double>(gv[c]) + static_cast<double>(bv[c]));
    }
  }
  const int32_t xid = x.id(), gid = gamma.id(), bid = beta.id();
  return tp.emit(
      "layernorm", sx, std::move(out), {xid, gid, bid},
      [xid, gid, bid, m, n, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape<S>& t, int32_t self) {
        const S* g = t.node(self).grad.data();
        const S* gv2 = t.node(gid).value.data();
        if (t.node(gid).needs_grad) {
          S* dg = t.grad_buffer(gid);
          for (int64_t r = 0; r < m; ++r)
            for (int64_t c = 0; c < n; ++c) dg[c] += g[r * n + c] * xhat[r * n + c];
        }
        if (t.node(bid).needs_grad) {
          S* db = t.grad_buffer(bid);
          for (int64_t r = 0; r < m; ++r)
            for (int64_t c = 0; c < n; ++c) db[c] += g[r * n + c];
        }
        if (t.node(xid).needs_grad) {
          S* dx = t.grad_buffer(xid);
          for (int64_t r = 0; r < m; ++r) {
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (int64_t c = 0; c < n; ++c) {
              const double dxh =
                  static_cast<double>(g[r * n + c]) * static_cast<double>(gv2[c]);
              mean_dxh += dxh;
              mean_dxh_xh += dxh * static_cast<double>(xhat[r * n + c]);
            }
            mean_dxh /= static_cast<double>(n);
            mean_dxh_xh /= static_cast<double>(n);
            const double is = static_cast<double>(inv_std[static_cast<size_t>(r)]);
            for (int64_t c = 0; c < n; ++c) {
              const double dxh =
                  static_cast<double>(g[r * n + c]) * static_cast<double>(gv2[c]);
              dx[r * n + c] += static_cast<S>(
                  is * (dxh - mean_dxh -
                        static_cast<double>(xhat[r * n + c]) * mean_dxh_xh));
            }
          }
        }
      });
}

// Mean over rows: [m,n] -> [1,n].
template <typename S>
Tensor<S> mean_rows(Tensor<S> a) {
  require(a.valid(), ErrorKind::Usage, "mean_rows: invalid tensor handle");
  Tape<S>& tp = *a.tape();
  const Shape sa = tp.node(a.id()).shape;
  detail::require_rank2(sa, "mean_rows");
  const int64_t m = sa[0], n = sa[1];
  require(m > 0, ErrorKind::Usage, "mean_rows: empty input");
  const S* av = tp.node(a.id()).value.data();
  std::vector<S> out(static_cast<size_t>(n), S(0));
  for (int64_t r = 0; r < m; ++r)
    for (int64_t c = 0; c < n; ++c)
      out[static_cast<size_t>(c)] += av[r * n + c];
  for (int64_t c = 0; c < n; ++c)
    out[static_cast<size_t>(c)] = static_cast<S>(static_cast<double>(out[static_cast<size_t>(c)]) / m);
  const int32_t aid = a.id();
  return tp.emit("mean_rows", {1, n}, std::move(out), {aid},
                 [aid, m, n](Tape<S>& t, int32_t self) {
                   if (!t.node(aid).needs_grad) return;
                   const S* g = t.node(self).grad.data();
                   S* da = t.grad_buffer(aid);
                   const S inv = static_cast<S>(1.0 / static_cast<double>(m));
                   for (int64_t r = 0; r < m; ++r)
                     for (int64_t c = 0; c < n; ++c) da[r * n + c] += g[c] * inv;
                 });
}

template <typename S>
Tensor<S> sum_all(Tensor<S> a) {
  require(a.valid(), ErrorKind::Usage, "sum_all: invalid tensor handle");
  Tape<S>& tp = *a.tape();
  const int64_t n = shape_numel(tp.node(a.id()).shape);
  const S* av = tp.node(a.id()).value.data();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(av[i]);
  const int32_t aid = a.id();
  return tp.emit("sum_all", {1}, {static_cast<S>(acc)}, {aid},
                 [aid, n](Tape<S>& t, int32_t self) {
                   if (!t.node(aid).needs_grad) return;
                   const S g = t.node(self).grad[0];
                   S* da = t.grad_buffer(aid);
                   for (int64_t i = 0; i < n; ++i) da[i] += g;
                 });
}

// Concatenate rank-2 tensors along axis 0 (rows) or 1 (columns).
template <typename S>
Tensor<S> concat(int axis, const std::vector<Tensor<S>>& parts) {
  require(!parts.empty(), ErrorKind::Usage, "concat: no inputs");
  require(axis == 0 || axis == 1, ErrorKind::Usage, cat("concat: invalid axis ", axis));
  Tape<S>& tp = *parts[0].tape();
  std::vector<int32_t> ids;
  int64_t rows0 = -1, cols0 = -1, total = 0;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p, "concat");
    const Shape sp = tp.node(p.id()).shape;
    detail::require_rank2(sp, "concat");
    if (rows0 < 0) {
      rows0 = sp[0];
      cols0 = sp[1];
    }
    require(axis == 1 ? sp[0] == rows0 : sp[1] == cols0, ErrorKind::Usage,
            "concat: parts disagree on the non-concatenated dimension");
    total += sp[axis];
    ids.push_back(p.id());
  }
  const int64_t out_rows = axis == 0 ? total : rows0;
  const int64_t out_cols = axis == 1 ? total : cols0;
  std::vector<S> out(static_cast<size_t>(out_rows * out_cols));
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& p : parts) {
    const Shape sp = tp.node(p.id()).shape;
    const S* pv = tp.node(p.id()).value.data();
    offsets.push_back(off);
    if (axis == 1) {
      for (int64_t r = 0; r < sp[0]; ++r)
        std::copy(pv + r * sp[1], pv + (r + 1) * sp[1],
                  out.begin() + r * out_cols + off);
    } else {
      std::copy(pv, pv + sp[0] * sp[1], out.begin() + off * out_cols);
    }
    off += sp[axis];
  }
  // emit() takes an initializer_list for needs_grad propagation; with a
  // dynamic input count, propagate by hand and patch the node afterwards.
  bool needs = false;
  if (tp.grad_enabled()) {
    for (int32_t id : ids) needs = needs || tp.node(id).needs_grad;
  }
  Tensor<S> result =
      tp.emit("concat", {out_rows, out_cols}, std::move(out), {}, nullptr);
  tp.node(result.id()).needs_grad = needs;
  if (needs) {
    tp.node(result.id()).backward = [ids, offsets, axis,
                                     out_cols](Tape<S>& t, int32_t self) {
      const S* g = t.node(self).grad.data();
      for (size_t i = 0; i < ids.size(); ++i) {
        if (!t.node(ids[i]).needs_grad) continue;
        const Shape sp = t.node(ids[i]).shape;
        S* dp = t.grad_buffer(ids[i]);
        if (axis == 1) {
          for (int64_t r = 0; r < sp[0]; ++r)
            for (int64_t c = 0; c < sp[1]; ++c)
              dp[r * sp[1] + c] += g[r * out_cols + offsets[i] + c];
        } else {
          for (int64_t j = 0; j < sp[0] * sp[1]; ++j)
            dp[j] += g[offsets[i] * out_cols + j];
        }
      }
    };
  }
  return result;
}

template <typename S>
Tensor<S> concat(int axis, std::initializer_list<Tensor<S>> parts) {
  return concat(axis, std::vector<Tensor<S>>(parts));
}

// Select rows by index: out[i] = a[idx[i]]. Duplicate indices accumulate in
// the backward pass.
template <typename S>
Tensor<S> gather_rows(Tensor<S> a, std::vector<int64_t> idx) {
  require(a.valid(), ErrorKind::Usage, "gather_rows: invalid tensor handle");
  Tape<S>& tp = *a.tape();
  const Shape sa = tp.node(a.id()).shape;
  detail::require_rank2(sa, "gather_rows");
  require(!idx.empty(), ErrorKind::Usage, "gather_rows: empty index list");
  const int64_t m = sa[0], n = sa[1];
  const S* av = tp.node(a.id()).value.data();
  std::vector<S> out(idx.size() * static_cast<size_t>(n));
  for (size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < m, ErrorKind::Usage,
            cat("gather_rows: index ", idx[i], " out of range [0,", m, ")"));
    std::copy(av + idx[i] * n, av + (idx[i] + 1) * n, out.begin() + static_cast<int64_t>(i) * n);
  }
  const int32_t aid = a.id();
  const int64_t k = static_cast<int64_t>(idx.size());
  return tp.emit("gather_rows", {k, n}, std::move(out), {aid},
                 [aid, n, idx = std::move(idx)](Tape<S>& t, int32_t self) {
                   if (!t.node(aid).needs_grad) return;
                   const S* g = t.node(self).grad.data();
                   S* da = t.grad_buffer(aid);
                   for (size_t i = 0; i < idx.size(); ++i)
                     for (int64_t c = 0; c < n; ++c)
                       da[idx[i] * n + c] += g[static_cast<int64_t>(i) * n + c];
                 });
}

// Column slice [c0, c1) of a rank-2 tensor.
template <typename S>
Tensor<S> slice_cols(Tensor<S> a, int64_t c0, int64_t c1) {
  require(a.valid(), ErrorKind::Usage, "slice_cols: invalid tensor handle");
  Tape<S>& tp = *a.tape();
  const Shape sa = tp.node(a.id()).shape;
  detail::require_rank2(sa, "slice_cols");
  const int64_t m = sa[0], n = sa[1];
  require(0 <= c0 && c0 < c1 && c1 <= n, ErrorKind::Usage,
          cat("slice_cols: invalid range [", c0, ",", c1, ") for width ", n));
  const int64_t w = c1 - c0;
  const S* av = tp.node(a.id()).value.data();
  std::vector<S> out(static_cast<size_t>(m * w));
  for (int64_t r = 0; r < m; ++r)
    std::copy(av + r * n + c0, av + r * n + c1, out.begin() + r * w);
  const int32_t aid = a.id();
  return tp.emit("slice_cols", {m, w}, std::move(out), {aid},
                 [aid, m, n, w, c0](Tape<S>& t, int32_t self) {
                   if (!t.node(aid).needs_grad) return;
                   const S* g = t.node(self).grad.data();
                   S* da = t.grad_buffer(aid);
                   for (int64_t r = 0; r < m; ++r)
                     for (int64_t c = 0; c < w; ++c)
                       da[r * n + c0 + c] += g[r * w + c];
                 });
}

// L2-normalize each row: y = x / sqrt(<x,x> + eps).
template <typename S>
Tensor<S> l2_normalize_rows(Tensor<S> a, double eps = 1e-12) {
  require(a.valid(), ErrorKind::Usage, "l2_normalize_rows: invalid tensor handle");
  Tape<S>& tp = *a.tape();
  const Shape sa = tp.node(a.id()).shape;
  detail::require_rank2(sa, "l2_normalize_rows");
  const int64_t m = sa[0], n = sa[1];
  const S* av = tp.node(a.id()).value.data();
  std::vector<S> out(static_cast<size_t>(m * n));
  std::vector<S> inv_norm(static_cast<size_t>(m));
  for (int64_t r = 0; r < m; ++r) {
    double ss = eps;
    for (int64_t c = 0; c < n; ++c) {
      const double x = static_cast<double>(av[r * n + c]);
      ss += x * x;
    }
    const double in = 1.0 / std::sqrt(ss);
    inv_norm[static_cast<size_t>(r)] = static_cast<S>(in);
    for (int64_t c = 0; c < n; ++c)
      out[static_cast<size_t>(r * n + c)] =
          static_cast<S>(static_cast<double>(av[r * n + c]) * in);
  }
  const int32_t aid = a.id();
  return tp.emit(
      "l2_normalize_rows", sa, std::move(out), {aid},
      [aid, m, n, inv_norm = std::move(inv_norm)](Tape<S>& t, int32_t self) {
        if (!t.node(aid).needs_grad) return;
        const S* g = t.node(self).grad.data();
        const S* x = t.node(aid).value.data();
        S* da = t.grad_buffer(aid);
        for (int64_t r = 0; r < m; ++r) {
          const double in = static_cast<double>(inv_norm[static_cast<size_t>(r)]);
          double xg = 0.0;
          for (int64_t c = 0; c < n; ++c)
            xg += static_cast<double>(x[r * n + c]) * static_cast<double>(g[r * n + c]);
          for (int64_t c = 0; c < n; ++c) {
            da[r * n + c] += static_cast<S>(
                in * static_cast<double>(g[r * n + c]) -
                static_cast<double>(x[r * n + c]) * xg * in * in * in);
          }
        }
      });
}

// Replace rows of a [N,D] tensor where mask[i] != 0 with a shared [1,D] row.
template <typename S>
Tensor<S> replace_rows(Tensor<S> a, Tensor<S> row, std::vector<uint8_t> mask) {
  Tape<S>& tp = *detail::same_tape(a, row, "replace_rows");
  const Shape sa = tp.node(a.id()).shape;
  const Shape sr = tp.node(row.id()).shape;
  detail::require_rank2(sa, "replace_rows");
  const int64_t m = sa[0], n = sa[1];
  require(shape_numel(sr) == n, ErrorKind::Usage,
          "replace_rows: replacement row width must match");
  require(static_cast<int64_t>(mask.size()) == m, ErrorKind::Usage,
          cat("replace_rows: mask length ", mask.size(), " != rows ", m));
  std::vector<S> out(tp.node(a.id()).value);
  const S* rv = tp.node(row.id()).value.data();
  for (int64_t r = 0; r < m; ++r) {
    if (!mask[static_cast<size_t>(r)]) continue;
    std::copy(rv, rv + n, out.begin() + r * n);
  }
  const int32_t aid = a.id(), rid = row.id();
  return tp.emit("replace_rows", sa, std::move(out), {aid, rid},
                 [aid, rid, m, n, mask = std::move(mask)](Tape<S>& t, int32_t self) {
                   const S* g = t.node(self).grad.data();
                   if (t.node(aid).needs_grad) {
                     S* da = t.grad_buffer(aid);
                     for (int64_t r = 0; r < m; ++r) {
                       if (mask[static_cast<size_t>(r)]) continue;
                       for (int64_t c = 0; c < n; ++c) da[r * n + c] += g[r * n + c];
                     }
                   }
                   if (t.node(rid).needs_grad) {
                     S* dr = t.grad_buffer(rid);
                     for (int64_t r = 0; r < m; ++r) {
                       if (!mask[static_cast<size_t>(r)]) continue;
                       for (int64_t c = 0; c < n; ++c) dr[c] += g[r * n + c];
                     }
                   }
                 });
}

// Copy-reshape; total element count must be preserved.
template <typename S>
Tensor<S> reshape(Tensor<S> a, Shape new_shape) {
  require(a.valid(), ErrorKind::Usage, "reshape: invalid tensor handle");
  Tape<S>& tp = *a.tape();
  const Shape sa = tp.node(a.id()).shape;
  require(shape_numel(sa) == shape_numel(new_shape), ErrorKind::Usage,
          cat("reshape: cannot view ", shape_str(sa), " as ", shape_str(new_shape)));
  std::vector<S> out(tp.node(a.id()).value);
  const int32_t aid = a.id();
  const int64_t n = shape_numel(sa);
  return tp.emit("reshape", std::move(new_shape), std::move(out), {aid},
                 [aid, n](Tape<S>& t, int32_t self) {
                   if (!t.node(aid).needs_grad) return;
                   const S* g = t.node(self).grad.data();
                   S* da = t.grad_buffer(aid);
                   for (int64_t i = 0; i < n; ++i) da[i] += g[i];
                 });
}

namespace detail {

// Mean over rows of -<P_r, log_softmax(s_r / tau_s)> with constant target
// distributions P. Shared body of the cross-entropy ops.
template <typename S>
Tensor<S> ce_mean_with_probs(Tensor<S> s, std::vector<double> probs, double tau_s,
                             const char* op) {
  require(s.valid(), ErrorKind::Usage, cat(op, ": invalid tensor handle"));
  require(std::isfinite(tau_s) && tau_s > 0.0, ErrorKind::Usage,
          cat(op, ": student temperature must be positive"));
  Tape<S>& tp = *s.tape();
  Shape ss = tp.node(s.id()).shape;
  if (ss.size() == 1) ss = {1, ss[0]};
  require_rank2(ss, op);
  const int64_t m = ss[0], d = ss[1];
  require(static_cast<int64_t>(probs.size()) == m * d, ErrorKind::Usage,
          cat(op, ": target distribution size mismatch"));
  for (double p : probs)
    require(std::isfinite(p) && p >= 0.0, ErrorKind::Numeric,
            cat(op, ": target distribution has invalid entries"));
  const S* sv = tp.node(s.id()).value.data();
  double total = 0.0;
  for (int64_t r = 0; r < m; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < d; ++c)
      mx = std::max(mx, static_cast<double>(sv[r * d + c]) / tau_s);
    double denom = 0.0;
    for (int64_t c = 0; c < d; ++c)
      denom += std::exp(static_cast<double>(sv[r * d + c]) / tau_s - mx);
    const double lse = mx + std::log(denom);
    double row = 0.0;
    for (int64_t c = 0; c < d; ++c)
      row -= probs[static_cast<size_t>(r * d + c)] *
             (static_cast<double>(sv[r * d + c]) / tau_s - lse);
    total += row;
  }
  total /= static_cast<double>(m);
  const int32_t sid = s.id();
  return tp.emit(
      op, {1}, {static_cast<S>(total)}, {sid},
      [sid, m, d, tau_s, probs = std::move(probs)](Tape<S>& t, int32_t self) {
        if (!t.node(sid).needs_grad) return;
        const double g = static_cast<double>(t.node(self).grad[0]);
        const S* sv2 = t.node(sid).value.data();
        S* ds = t.grad_buffer(sid);
        const double coef = g / (static_cast<double>(m) * tau_s);
        for (int64_t r = 0; r < m; ++r) {
          double mx = -std::numeric_limits<double>::infinity();
          for (int64_t c = 0; c < d; ++c)
            mx = std::max(mx, static_cast<double>(sv2[r * d + c]) / tau_s);
          double denom = 0.0;
          for (int64_t c = 0; c < d; ++c)
            denom += std::exp(static_cast<double>(sv2[r * d + c]) / tau_s - mx);
          for (int64_t c = 0; c < d; ++c) {
            const double q =
                std::exp(static_cast<double>(sv2[r * d + c]) / tau_s - mx) / denom;
            ds[r * d + c] += static_cast<S>(
                coef * (q - probs[static_cast<size_t>(r * d + c)]));
          }
        }
      });
}

// Softmax over each length-d row of a raw buffer, computed in double.
inline std::vector<double> softmax_rows_raw(const double* x, int64_t m, int64_t d,
                                            double tau) {
  std::vector<double> p(static_cast<size_t>(m * d));
  for (int64_t r = 0; r < m; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < d; ++c) mx = std::max(mx, x[r * d + c] / tau);
    double denom = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      p[static_cast<size_t>(r * d + c)] = std::exp(x[r * d + c] / tau - mx);
      denom += p[static_cast<size_t>(r * d + c)];
    }
    for (int64_t c = 0; c < d; ++c) p[static_cast<size_t>(r * d + c)] /= denom;
  }
  return p;
}

}  // namespace detail

// Cross-entropy between distributions induced by two embeddings:
//   CE = -<softmax(t / tau_t), log softmax(s / tau_s)>,
// mean over rows for rank-2 inputs. The teacher side is a constant: no
// gradient flows into t regardless of its requires_grad flag.
template <typename S>
Tensor<S> cross_entropy_distr(Tensor<S> t, Tensor<S> s, double tau_t, double tau_s) {
  Tape<S>& tp = *detail::same_tape(t, s, "cross_entropy_distr");
  require(std::isfinite(tau_t) && tau_t > 0.0, ErrorKind::Usage,
          "cross_entropy_distr: teacher temperature must be positive");
  Shape st = tp.node(t.id()).shape;
  require(st == tp.node(s.id()).shape, ErrorKind::Usage,
          "cross_entropy_distr: embeddings must have equal shapes");
  if (st.size() == 1) st = {1, st[0]};
  const int64_t m = st[0], d = st[1];
  std::vector<double> tvals(static_cast<size_t>(m * d));
  const S* tv = tp.node(t.id()).value.data();
  for (int64_t i = 0; i < m * d; ++i) tvals[static_cast<size_t>(i)] = static_cast<double>(tv[i]);
  std::vector<double> probs = detail::softmax_rows_raw(tvals.data(), m, d, tau_t);
  return detail::ce_mean_with_probs(s, std::move(probs), tau_s, "cross_entropy_distr");
}

// Same loss with explicit target probability rows (already softmaxed, e.g.
// after teacher centering). probs has one length-d distribution per row of s.
template <typename S>
Tensor<S> cross_entropy_probs(std::vector<double> probs, Tensor<S> s, double tau_s) {
  return detail::ce_mean_with_probs(s, std::move(probs), tau_s, "cross_entropy_probs");
}

// Mean of a list of scalar tensors (used to average per-sample losses).
template <typename S>
Tensor<S> mean_scalars(const std::vector<Tensor<S>>& xs) {
  require(!xs.empty(), ErrorKind::Usage, "mean_scalars: empty list");
  Tensor<S> acc = xs[0];
  for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return scale(acc, 1.0 / static_cast<double>(xs.size()));
}

// ---------------------------------------------------------------------------
// Parameters and the AdamW update (off-tape).
// ---------------------------------------------------------------------------

template <typename S>
struct ParamTensor {
  std::string name;
  Shape shape;
  std::vector<S> value;
  std::vector<S> adam_m;
  std::vector<S> adam_v;

  int64_t numel() const { return shape_numel(shape); }
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// One decoupled-weight-decay Adam step. step_index is 1-based for the bias
// corrections. Moment buffers are allocated on the first call.
template <typename S>
void adamw_update(ParamTensor<S>& p, std::span<const S> grad, const AdamWConfig& c,
                  int64_t step_index) {
  const size_t n = static_cast<size_t>(p.numel());
  require(grad.size() == n, ErrorKind::Usage,
          cat("adamw_update: gradient size ", grad.size(), " != parameter size ", n,
              " for '", p.name, "'"));
  require(step_index >= 1, ErrorKind::Usage, "adamw_update: step_index is 1-based");
  if (p.adam_m.size() != n) p.adam_m.assign(n, S(0));
  if (p.adam_v.size() != n) p.adam_v.assign(n, S(0));
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step_index));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step_index));
  for (size_t i = 0; i < n; ++i) {
    const double g = static_cast<double>(grad[i]);
    const double m = c.beta1 * static_cast<double>(p.adam_m[i]) + (1.0 - c.beta1) * g;
    const double v = c.beta2 * static_cast<double>(p.adam_v[i]) + (1.0 - c.beta2) * g * g;
    p.adam_m[i] = static_cast<S>(m);
    p.adam_v[i] = static_cast<S>(v);
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    const double x = static_cast<double>(p.value[i]);
    p.value[i] =
        static_cast<S>(x - c.lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * x));
  }
}

}  // namespace evssl
