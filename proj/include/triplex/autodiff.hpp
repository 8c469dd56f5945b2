#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "triplex/common.hpp"
#include "triplex/tensor.hpp"

namespace triplex {

// Reverse-mode differentiation over Tensor<T>. Ops record a dynamic graph
// whenever gradients are enabled and at least one input requires them.
// Graph recording and backward are single-threaded per training step; kernels
// may parallelize internally (deterministically).

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

struct NoGradGuard {
  NoGradGuard() : prev(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  bool prev;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool is_leaf = false;
  bool backward_ran = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node<T>>> inputs;
  std::function<void(Node<T>&)> backward_fn;

  bool has_grad() const { return grad.numel() == value.numel() && value.numel() > 0; }

  void accum_grad(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (!has_grad()) grad = Tensor<T>::zeros(value.shape());
    T* dst = grad.data();
    const T* src = g.data();
    const int64_t n = grad.numel();
    for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
  }
};

template <typename T>
class Var {
 public:
  Var() = default;

  static Var leaf(Tensor<T> v, bool requires_grad = false) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(v);
    node->requires_grad = requires_grad;
    node->is_leaf = true;
    return Var(std::move(node));
  }

  static Var constant(Tensor<T> v) { return leaf(std::move(v), false); }
  static Var scalar(T v) { return constant(Tensor<T>::scalar(v)); }
  static Var from_node(std::shared_ptr<Node<T>> n) { return Var(std::move(n)); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const std::vector<int64_t>& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  const Tensor<T>& grad() const {
    if (!has_grad()) throw ValueError("grad: no gradient accumulated for this tensor");
    return node_->grad;
  }

  bool has_grad() const { return node_ && node_->has_grad(); }

  void zero_grad() const {
    if (node_) node_->grad = Tensor<T>();
  }

  // Replaces a leaf's value (optimizer updates between steps). The handle is
  // a reference to the shared node, so this is usable through const handles.
  void set_value(Tensor<T> v) const {
    if (!node_->is_leaf) throw ValueError("set_value: only leaves are assignable");
    if (!node_->value.same_shape(v))
      throw ShapeError("set_value: " + shape_str(node_->value.shape()) + " -> " +
                       shape_str(v.shape()));
    node_->value = std::move(v);
  }

  std::shared_ptr<Node<T>> node() const { return node_; }

 private:
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Var<T> make_op(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
               std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  node->is_leaf = false;
  bool needs = false;
  if (grad_enabled())
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>::from_node(std::move(node));
}

inline void check_same(const char* op, const std::vector<int64_t>& a,
                       const std::vector<int64_t>& b) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same("add", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  return detail::make_op<T>("add", std::move(out), {a, b}, [](Node<T>& nd) {
    nd.inputs[0]->accum_grad(nd.grad);
    nd.inputs[1]->accum_grad(nd.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same("sub", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  return detail::make_op<T>("sub", std::move(out), {a, b}, [](Node<T>& nd) {
    nd.inputs[0]->accum_grad(nd.grad);
    if (nd.inputs[1]->requires_grad) {
      Tensor<T> gb(nd.grad.shape());
      const T* g = nd.grad.data();
      T* p = gb.data();
      for (int64_t i = 0; i < gb.numel(); ++i) p[i] = -g[i];
      nd.inputs[1]->accum_grad(gb);
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same("mul", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  return detail::make_op<T>("mul", std::move(out), {a, b}, [](Node<T>& nd) {
    const T* g = nd.grad.data();
    const int64_t n = nd.grad.numel();
    if (nd.inputs[0]->requires_grad) {
      Tensor<T> ga(nd.grad.shape());
      const T* pb = nd.inputs[1]->value.data();
      T* p = ga.data();
      for (int64_t i = 0; i < n; ++i) p[i] = g[i] * pb[i];
      nd.inputs[0]->accum_grad(ga);
    }
    if (nd.inputs[1]->requires_grad) {
      Tensor<T> gb(nd.grad.shape());
      const T* pa = nd.inputs[0]->value.data();
      T* p = gb.data();
      for (int64_t i = 0; i < n; ++i) p[i] = g[i] * pa[i];
      nd.inputs[1]->accum_grad(gb);
    }
  });
}

// Multiply by a compile-time constant (no graph input for the scalar).
template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out(a.shape());
  const T* pa = a.value().data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * c;
  return detail::make_op<T>("scale", std::move(out), {a}, [c](Node<T>& nd) {
    Tensor<T> ga(nd.grad.shape());
    const T* g = nd.grad.data();
    T* p = ga.data();
    for (int64_t i = 0; i < ga.numel(); ++i) p[i] = g[i] * c;
    nd.inputs[0]->accum_grad(ga);
  });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  return scale(a, T(-1));
}

// x (..., d) + bias (d), broadcast over leading dims.
template <typename T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& bias) {
  const auto& xs = x.shape();
  const int64_t d = xs.back();
  if (bias.shape().size() != 1 || bias.shape()[0] != d)
    throw ShapeError("add_rowvec: shape " + shape_str(xs) + " vs " + shape_str(bias.shape()));
  Tensor<T> out(xs);
  const T* px = x.value().data();
  const T* pb = bias.value().data();
  T* po = out.data();
  const int64_t rows = out.numel() / d;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pb[j];
  return detail::make_op<T>("add_rowvec", std::move(out), {x, bias}, [d](Node<T>& nd) {
    nd.inputs[0]->accum_grad(nd.grad);
    if (nd.inputs[1]->requires_grad) {
      Tensor<T> gb({d});
      const T* g = nd.grad.data();
      T* p = gb.data();
      const int64_t rows = nd.grad.numel() / d;
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) p[j] += g[r * d + j];
      nd.inputs[1]->accum_grad(gb);
    }
  });
}

// a (h, q, k) + bias (q, k), broadcast over the head axis.
template <typename T>
Var<T> add_bcast0(const Var<T>& a, const Var<T>& bias) {
  const auto& as = a.shape();
  if (as.size() != 3 || bias.shape().size() != 2 || bias.shape()[0] != as[1] ||
      bias.shape()[1] != as[2])
    throw ShapeError("add_bcast0: shape " + shape_str(as) + " vs " + shape_str(bias.shape()));
  Tensor<T> out(as);
  const int64_t h = as[0], qk = as[1] * as[2];
  const T* pa = a.value().data();
  const T* pb = bias.value().data();
  T* po = out.data();
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < qk; ++j) po[i * qk + j] = pa[i * qk + j] + pb[j];
  return detail::make_op<T>("add_bcast0", std::move(out), {a, bias}, [h, qk](Node<T>& nd) {
    nd.inputs[0]->accum_grad(nd.grad);
    if (nd.inputs[1]->requires_grad) {
      Tensor<T> gb(nd.inputs[1]->value.shape());
      const T* g = nd.grad.data();
      T* p = gb.data();
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < qk; ++j) p[j] += g[i * qk + j];
      nd.inputs[1]->accum_grad(gb);
    }
  });
}

template <typename T, typename F, typename DF>
Var<T> unary_map(const char* op, const Var<T>& a, F f, DF df) {
  Tensor<T> out(a.shape());
  const T* pa = a.value().data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = f(pa[i]);
  return detail::make_op<T>(op, std::move(out), {a}, [df](Node<T>& nd) {
    Tensor<T> ga(nd.grad.shape());
    const T* g = nd.grad.data();
    const T* x = nd.inputs[0]->value.data();
    T* p = ga.data();
    for (int64_t i = 0; i < ga.numel(); ++i) p[i] = g[i] * df(x[i]);
    nd.inputs[0]->accum_grad(ga);
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return unary_map(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary_map(
      "gelu", a,
      [=](T x) {
        double xd = static_cast<double>(x);
        return static_cast<T>(0.5 * xd * (1.0 + std::erf(xd * inv_sqrt2)));
      },
      [=](T x) {
        double xd = static_cast<double>(x);
        double cdf = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
        return static_cast<T>(cdf + xd * pdf);
      });
}

template <typename T>
Var<T> sin_op(const Var<T>& a) {
  return unary_map(
      "sin", a, [](T x) { return std::sin(x); }, [](T x) { return std::cos(x); });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return unary_map(
      "square", a, [](T x) { return x * x; }, [](T x) { return T(2) * x; });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
    throw ShapeError("matmul: shape " + shape_str(as) + " vs " + shape_str(bs));
  const int64_t n = as[0], k = as[1], m = bs[1];
  Tensor<T> out({n, m});
  gemm_acc(a.value().data(), b.value().data(), out.data(), n, k, m);
  return detail::make_op<T>("matmul", std::move(out), {a, b}, [n, k, m](Node<T>& nd) {
    const Tensor<T>& av = nd.inputs[0]->value;
    const Tensor<T>& bv = nd.inputs[1]->value;
    if (nd.inputs[0]->requires_grad) {
      Tensor<T> ga({n, k});
      gemm_nt_acc(nd.grad.data(), bv.data(), ga.data(), n, m, k);
      nd.inputs[0]->accum_grad(ga);
    }
    if (nd.inputs[1]->requires_grad) {
      Tensor<T> gb({k, m});
      gemm_tn_acc(av.data(), nd.grad.data(), gb.data(), n, k, m);
      nd.inputs[1]->accum_grad(gb);
    }
  });
}

// Batched matmul: a (B, n, k) @ b (B, k, m) -> (B, n, m)
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1])
    throw ShapeError("bmm: shape " + shape_str(as) + " vs " + shape_str(bs));
  const int64_t nb = as[0], n = as[1], k = as[2], m = bs[2];
  Tensor<T> out({nb, n, m});
  for (int64_t i = 0; i < nb; ++i)
    gemm_acc(a.value().data() + i * n * k, b.value().data() + i * k * m, out.data() + i * n * m,
             n, k, m);
  return detail::make_op<T>("bmm", std::move(out), {a, b}, [nb, n, k, m](Node<T>& nd) {
    const T* av = nd.inputs[0]->value.data();
    const T* bv = nd.inputs[1]->value.data();
    const T* g = nd.grad.data();
    if (nd.inputs[0]->requires_grad) {
      Tensor<T> ga({nb, n, k});
      for (int64_t i = 0; i < nb; ++i)
        gemm_nt_acc(g + i * n * m, bv + i * k * m, ga.data() + i * n * k, n, m, k);
      nd.inputs[0]->accum_grad(ga);
    }
    if (nd.inputs[1]->requires_grad) {
      Tensor<T> gb({nb, k, m});
      for (int64_t i = 0; i < nb; ++i)
        gemm_tn_acc(av + i * n * k, g + i * n * m, gb.data() + i * k * m, n, k, m);
      nd.inputs[1]->accum_grad(gb);
    }
  });
}

// ---------------------------------------------------------------------------
// Shape ops (reshape shares storage; permute copies)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int64_t> new_shape) {
  Tensor<T> out = a.value().reshaped(std::move(new_shape));
  auto old_shape = a.shape();
  return detail::make_op<T>("reshape", std::move(out), {a}, [old_shape](Node<T>& nd) {
    nd.inputs[0]->accum_grad(nd.grad.reshaped(old_shape));
  });
}

namespace detail {
template <typename T>
Tensor<T> permute_copy(const Tensor<T>& x, const std::vector<int>& perm) {
  const auto& s = x.shape();
  const size_t r = s.size();
  std::vector<int64_t> out_shape(r);
  for (size_t i = 0; i < r; ++i) out_shape[i] = s[perm[i]];
  Tensor<T> out(out_shape);
  std::vector<int64_t> in_strides(r, 1), out_strides(r, 1);
  for (int i = static_cast<int>(r) - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * s[i + 1];
  for (int i = static_cast<int>(r) - 2; i >= 0; --i)
    out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
  const T* px = x.data();
  T* po = out.data();
  const int64_t n = x.numel();
  std::vector<int64_t> idx(r, 0);
  for (int64_t lin = 0; lin < n; ++lin) {
    int64_t src = 0;
    for (size_t i = 0; i < r; ++i) src += idx[i] * in_strides[perm[i]];
    po[lin] = px[src];
    for (int i = static_cast<int>(r) - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}
}  // namespace detail

template <typename T>
Var<T> permute(const Var<T>& a, std::vector<int> perm) {
  const size_t r = a.shape().size();
  if (perm.size() != r) throw ShapeError("permute: order size mismatch for " + shape_str(a.shape()));
  Tensor<T> out = detail::permute_copy(a.value(), perm);
  std::vector<int> inv(r);
  for (size_t i = 0; i < r; ++i) inv[perm[i]] = static_cast<int>(i);
  return detail::make_op<T>("permute", std::move(out), {a}, [inv](Node<T>& nd) {
    nd.inputs[0]->accum_grad(detail::permute_copy(nd.grad, inv));
  });
}

template <typename T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[1])
    throw ShapeError("concat_rows: shape " + shape_str(as) + " vs " + shape_str(bs));
  const int64_t r1 = as[0], r2 = bs[0], d = as[1];
  Tensor<T> out({r1 + r2, d});
  std::copy(a.value().data(), a.value().data() + r1 * d, out.data());
  std::copy(b.value().data(), b.value().data() + r2 * d, out.data() + r1 * d);
  return detail::make_op<T>("concat_rows", std::move(out), {a, b}, [r1, r2, d](Node<T>& nd) {
    if (nd.inputs[0]->requires_grad) {
      Tensor<T> ga({r1, d});
      std::copy(nd.grad.data(), nd.grad.data() + r1 * d, ga.data());
      nd.inputs[0]->accum_grad(ga);
    }
    if (nd.inputs[1]->requires_grad) {
      Tensor<T> gb({r2, d});
      std::copy(nd.grad.data() + r1 * d, nd.grad.data() + (r1 + r2) * d, gb.data());
      nd.inputs[1]->accum_grad(gb);
    }
  });
}

// ---------------------------------------------------------------------------
// Index ops
// ---------------------------------------------------------------------------

// Select rows of x (n, d) by index -> (len(idx), d). Indices may repeat.
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<int64_t> idx) {
  const auto& xs = x.shape();
  if (xs.size() != 2) throw ShapeError("gather_rows: expected matrix, got " + shape_str(xs));
  const int64_t n = xs[0], d = xs[1];
  for (int64_t i : idx)
    if (i < 0 || i >= n) throw ValueError("gather_rows: index " + std::to_string(i) + " out of range");
  Tensor<T> out({static_cast<int64_t>(idx.size()), d});
  const T* px = x.value().data();
  T* po = out.data();
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy(px + idx[r] * d, px + (idx[r] + 1) * d, po + r * d);
  return detail::make_op<T>("gather_rows", std::move(out), {x}, [idx, n, d](Node<T>& nd) {
    Tensor<T> gx({n, d});
    const T* g = nd.grad.data();
    T* p = gx.data();
    for (size_t r = 0; r < idx.size(); ++r)
      for (int64_t j = 0; j < d; ++j) p[idx[r] * d + j] += g[r * d + j];
    nd.inputs[0]->accum_grad(gx);
  });
}

// Spread rows of x (n, d) into a (rows, d) zero matrix at unique indices.
template <typename T>
Var<T> scatter_rows(const Var<T>& x, const std::vector<int64_t>& idx, int64_t rows) {
  const auto& xs = x.shape();
  if (xs.size() != 2 || static_cast<int64_t>(idx.size()) != xs[0])
    throw ShapeError("scatter_rows: " + std::to_string(idx.size()) + " indices for " + shape_str(xs));
  std::unordered_set<int64_t> seen;
  for (int64_t i : idx) {
    if (i < 0 || i >= rows) throw ValueError("scatter_rows: index " + std::to_string(i) + " out of range");
    if (!seen.insert(i).second)
      throw ValueError("scatter_rows: duplicate index " + std::to_string(i));
  }
  const int64_t d = xs[1];
  Tensor<T> out({rows, d});
  const T* px = x.value().data();
  T* po = out.data();
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy(px + r * d, px + (r + 1) * d, po + idx[r] * d);
  return detail::make_op<T>("scatter_rows", std::move(out), {x}, [idx, d](Node<T>& nd) {
    Tensor<T> gx({static_cast<int64_t>(idx.size()), d});
    const T* g = nd.grad.data();
    T* p = gx.data();
    for (size_t r = 0; r < idx.size(); ++r)
      std::copy(g + idx[r] * d, g + (idx[r] + 1) * d, p + r * d);
    nd.inputs[0]->accum_grad(gx);
  });
}

// Gather along the last axis of a (rows, n) table -> (rows, len(idx)).
// Used to expand relative-position bias tables; indices may repeat.
template <typename T>
Var<T> gather_last(const Var<T>& table, const std::vector<int64_t>& idx) {
  const auto& ts = table.shape();
  if (ts.size() != 2) throw ShapeError("gather_last: expected matrix, got " + shape_str(ts));
  const int64_t rows = ts[0], n = ts[1];
  for (int64_t i : idx)
    if (i < 0 || i >= n) throw ValueError("gather_last: index " + std::to_string(i) + " out of range");
  const int64_t m = static_cast<int64_t>(idx.size());
  Tensor<T> out({rows, m});
  const T* pt = table.value().data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < m; ++j) po[r * m + j] = pt[r * n + idx[j]];
  return detail::make_op<T>("gather_last", std::move(out), {table}, [idx, rows, n, m](Node<T>& nd) {
    Tensor<T> gt({rows, n});
    const T* g = nd.grad.data();
    T* p = gt.data();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < m; ++j) p[r * n + idx[j]] += g[r * m + j];
    nd.inputs[0]->accum_grad(gt);
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  const T* pa = a.value().data();
  T s = 0;
  for (int64_t i = 0; i < a.value().numel(); ++i) s += pa[i];
  return detail::make_op<T>("sum_all", Tensor<T>::scalar(s), {a}, [](Node<T>& nd) {
    nd.inputs[0]->accum_grad(Tensor<T>::full(nd.inputs[0]->value.shape(), nd.grad.item()));
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  const int64_t n = a.value().numel();
  return scale(sum_all(a), T(1) / static_cast<T>(n));
}

// Mean over axis 0 of (k, d) -> (1, d).
template <typename T>
Var<T> mean_rows(const Var<T>& a) {
  const auto& as = a.shape();
  if (as.size() != 2) throw ShapeError("mean_rows: expected matrix, got " + shape_str(as));
  const int64_t k = as[0], d = as[1];
  Tensor<T> out({1, d});
  const T* pa = a.value().data();
  T* po = out.data();
  for (int64_t i = 0; i < k; ++i)
    for (int64_t j = 0; j < d; ++j) po[j] += pa[i * d + j];
  const T inv = T(1) / static_cast<T>(k);
  for (int64_t j = 0; j < d; ++j) po[j] *= inv;
  return detail::make_op<T>("mean_rows", std::move(out), {a}, [k, d, inv](Node<T>& nd) {
    Tensor<T> ga({k, d});
    const T* g = nd.grad.data();
    T* p = ga.data();
    for (int64_t i = 0; i < k; ++i)
      for (int64_t j = 0; j < d; ++j) p[i * d + j] = g[j] * inv;
    nd.inputs[0]->accum_grad(ga);
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention kernels
// ---------------------------------------------------------------------------

// Softmax over the last axis. Subtracts the row max before exponentiation.
template <typename T>
Var<T> softmax_last(const Var<T>& a) {
  const auto& as = a.shape();
  const int64_t d = as.back();
  const int64_t rows = a.value().numel() / d;
  Tensor<T> out(as);
  const T* pa = a.value().data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = pa + r * d;
    T* y = po + r * d;
    T mx = x[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, x[j]);
    T s = 0;
    for (int64_t j = 0; j < d; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    const T inv = T(1) / s;
    for (int64_t j = 0; j < d; ++j) y[j] *= inv;
  }
  Tensor<T> saved = out;
  return detail::make_op<T>("softmax", std::move(out), {a}, [saved, d, rows](Node<T>& nd) {
    Tensor<T> ga(nd.grad.shape());
    const T* g = nd.grad.data();
    const T* y = saved.data();
    T* p = ga.data();
    for (int64_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (int64_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
      for (int64_t j = 0; j < d; ++j) p[r * d + j] = y[r * d + j] * (g[r * d + j] - dot);
    }
    nd.inputs[0]->accum_grad(ga);
  });
}

// Layer normalization over the last axis with affine parameters.
template <typename T>
Var<T> layer_norm_last(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                       T eps = T(1e-5)) {
  const auto& xs = x.shape();
  const int64_t d = xs.back();
  if (gamma.shape() != std::vector<int64_t>{d} || beta.shape() != std::vector<int64_t>{d})
    throw ShapeError("layer_norm: shape " + shape_str(xs) + " vs " + shape_str(gamma.shape()));
  const int64_t rows = x.value().numel() / d;
  Tensor<T> out(xs);
  Tensor<T> xhat(xs);
  Tensor<T> inv_sigma({rows});
  const T* px = x.value().data();
  const T* pg = gamma.value().data();
  const T* pb = beta.value().data();
  T* po = out.data();
  T* ph = xhat.data();
  T* pis = inv_sigma.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = px + r * d;
    T mean = 0;
    for (int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (int64_t j = 0; j < d; ++j) {
      T c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    pis[r] = is;
    for (int64_t j = 0; j < d; ++j) {
      ph[r * d + j] = (xr[j] - mean) * is;
      po[r * d + j] = pg[j] * ph[r * d + j] + pb[j];
    }
  }
  return detail::make_op<T>(
      "layer_norm", std::move(out), {x, gamma, beta}, [xhat, inv_sigma, d, rows](Node<T>& nd) {
        const T* g = nd.grad.data();
        const T* h = xhat.data();
        const T* pg = nd.inputs[1]->value.data();
        if (nd.inputs[1]->requires_grad) {
          Tensor<T> ggamma({d});
          T* p = ggamma.data();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j) p[j] += g[r * d + j] * h[r * d + j];
          nd.inputs[1]->accum_grad(ggamma);
        }
        if (nd.inputs[2]->requires_grad) {
          Tensor<T> gbeta({d});
          T* p = gbeta.data();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j) p[j] += g[r * d + j];
          nd.inputs[2]->accum_grad(gbeta);
        }
        if (nd.inputs[0]->requires_grad) {
          Tensor<T> gx(nd.grad.shape());
          T* p = gx.data();
          const T* pis = inv_sigma.data();
          for (int64_t r = 0; r < rows; ++r) {
            T sum_dh = 0, sum_dh_h = 0;
            for (int64_t j = 0; j < d; ++j) {
              T dh = g[r * d + j] * pg[j];
              sum_dh += dh;
              sum_dh_h += dh * h[r * d + j];
            }
            const T inv_d = T(1) / static_cast<T>(d);
            for (int64_t j = 0; j < d; ++j) {
              T dh = g[r * d + j] * pg[j];
              p[r * d + j] =
                  pis[r] * (dh - sum_dh * inv_d - h[r * d + j] * sum_dh_h * inv_d);
            }
          }
          nd.inputs[0]->accum_grad(gx);
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution (channels-first, "same" zero padding)
// ---------------------------------------------------------------------------

namespace detail {
struct ConvDims {
  int64_t cin, hin, win, cout, kh, kw, hout, wout, pad_h, pad_w, group_in, group_out;
  int stride, groups;
};

inline ConvDims conv_dims(const std::vector<int64_t>& xs, const std::vector<int64_t>& ws,
                          int stride, int groups) {
  if (xs.size() != 3 || ws.size() != 4)
    throw ShapeError("conv2d: shape " + shape_str(xs) + " vs " + shape_str(ws));
  ConvDims d;
  d.cin = xs[0];
  d.hin = xs[1];
  d.win = xs[2];
  d.cout = ws[0];
  d.kh = ws[2];
  d.kw = ws[3];
  d.stride = stride;
  d.groups = groups;
  if (d.kh % 2 == 0 || d.kw % 2 == 0)
    throw ShapeError("conv2d: kernel must be odd-sized, got " + shape_str(ws));
  if (d.cin % groups != 0 || d.cout % groups != 0 || ws[1] != d.cin / groups)
    throw ShapeError("conv2d: shape " + shape_str(xs) + " vs " + shape_str(ws) + " with groups " +
                     std::to_string(groups));
  d.hout = (d.hin + stride - 1) / stride;
  d.wout = (d.win + stride - 1) / stride;
  d.pad_h = ((d.hout - 1) * stride + d.kh - d.hin) / 2;
  d.pad_w = ((d.wout - 1) * stride + d.kw - d.win) / 2;
  d.group_in = d.cin / groups;
  d.group_out = d.cout / groups;
  return d;
}

template <typename T>
void conv2d_forward(const T* x, const T* w, T* y, const ConvDims& d) {
  TRIPLEX_PARALLEL_FOR
  for (int64_t oc = 0; oc < d.cout; ++oc) {
    const int64_t g = oc / d.group_out;
    for (int64_t oh = 0; oh < d.hout; ++oh) {
      for (int64_t ow = 0; ow < d.wout; ++ow) {
        T acc = 0;
        for (int64_t icl = 0; icl < d.group_in; ++icl) {
          const int64_t ic = g * d.group_in + icl;
          for (int64_t kh = 0; kh < d.kh; ++kh) {
            const int64_t ih = oh * d.stride - d.pad_h + kh;
            if (ih < 0 || ih >= d.hin) continue;
            for (int64_t kw = 0; kw < d.kw; ++kw) {
              const int64_t iw = ow * d.stride - d.pad_w + kw;
              if (iw < 0 || iw >= d.win) continue;
              acc += x[(ic * d.hin + ih) * d.win + iw] *
                     w[((oc * d.group_in + icl) * d.kh + kh) * d.kw + kw];
            }
          }
        }
        y[(oc * d.hout + oh) * d.wout + ow] = acc;
      }
    }
  }
}
}  // namespace detail

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride = 1, int groups = 1) {
  const auto dims = detail::conv_dims(x.shape(), w.shape(), stride, groups);
  Tensor<T> out({dims.cout, dims.hout, dims.wout});
  detail::conv2d_forward(x.value().data(), w.value().data(), out.data(), dims);
  return detail::make_op<T>("conv2d", std::move(out), {x, w}, [dims](Node<T>& nd) {
    const T* g = nd.grad.data();
    const T* xv = nd.inputs[0]->value.data();
    const T* wv = nd.inputs[1]->value.data();
    const auto& d = dims;
    if (nd.inputs[0]->requires_grad) {
      Tensor<T> gx({d.cin, d.hin, d.win});
      T* p = gx.data();
      for (int64_t oc = 0; oc < d.cout; ++oc) {
        const int64_t grp = oc / d.group_out;
        for (int64_t oh = 0; oh < d.hout; ++oh)
          for (int64_t ow = 0; ow < d.wout; ++ow) {
            const T gy = g[(oc * d.hout + oh) * d.wout + ow];
            if (gy == T(0)) continue;
            for (int64_t icl = 0; icl < d.group_in; ++icl) {
              const int64_t ic = grp * d.group_in + icl;
              for (int64_t kh = 0; kh < d.kh; ++kh) {
                const int64_t ih = oh * d.stride - d.pad_h + kh;
                if (ih < 0 || ih >= d.hin) continue;
                for (int64_t kw = 0; kw < d.kw; ++kw) {
                  const int64_t iw = ow * d.stride - d.pad_w + kw;
                  if (iw < 0 || iw >= d.win) continue;
                  p[(ic * d.hin + ih) * d.win + iw] +=
                      gy * wv[((oc * d.group_in + icl) * d.kh + kh) * d.kw + kw];
                }
              }
            }
          }
      }
      nd.inputs[0]->accum_grad(gx);
    }
    if (nd.inputs[1]->requires_grad) {
      Tensor<T> gw(nd.inputs[1]->value.shape());
      T* p = gw.data();
      for (int64_t oc = 0; oc < d.cout; ++oc) {
        const int64_t grp = oc / d.group_out;
        for (int64_t oh = 0; oh < d.hout; ++oh)
          for (int64_t ow = 0; ow < d.wout; ++ow) {
            const T gy = g[(oc * d.hout + oh) * d.wout + ow];
            if (gy == T(0)) continue;
            for (int64_t icl = 0; icl < d.group_in; ++icl) {
              const int64_t ic = grp * d.group_in + icl;
              for (int64_t kh = 0; kh < d.kh; ++kh) {
                const int64_t ih = oh * d.stride - d.pad_h + kh;
                if (ih < 0 || ih >= d.hin) continue;
                for (int64_t kw = 0; kw < d.kw; ++kw) {
                  const int64_t iw = ow * d.stride - d.pad_w + kw;
                  if (iw < 0 || iw >= d.win) continue;
                  p[((oc * d.group_in + icl) * d.kh + kh) * d.kw + kw] +=
                      gy * xv[(ic * d.hin + ih) * d.win + iw];
                }
              }
            }
          }
      }
      nd.inputs[1]->accum_grad(gw);
    }
  });
}

// x (C, H, W) + bias (C), broadcast over spatial dims.
template <typename T>
Var<T> add_chan_bias(const Var<T>& x, const Var<T>& bias) {
  const auto& xs = x.shape();
  if (xs.size() != 3 || bias.shape() != std::vector<int64_t>{xs[0]})
    throw ShapeError("add_chan_bias: shape " + shape_str(xs) + " vs " + shape_str(bias.shape()));
  const int64_t c = xs[0], hw = xs[1] * xs[2];
  Tensor<T> out(xs);
  const T* px = x.value().data();
  const T* pb = bias.value().data();
  T* po = out.data();
  for (int64_t i = 0; i < c; ++i)
    for (int64_t j = 0; j < hw; ++j) po[i * hw + j] = px[i * hw + j] + pb[i];
  return detail::make_op<T>("add_chan_bias", std::move(out), {x, bias}, [c, hw](Node<T>& nd) {
    nd.inputs[0]->accum_grad(nd.grad);
    if (nd.inputs[1]->requires_grad) {
      Tensor<T> gb({c});
      const T* g = nd.grad.data();
      T* p = gb.data();
      for (int64_t i = 0; i < c; ++i)
        for (int64_t j = 0; j < hw; ++j) p[i] += g[i * hw + j];
      nd.inputs[1]->accum_grad(gb);
    }
  });
}

// Non-overlapping average pooling of x (C, H, W) with a k x k window.
template <typename T>
Var<T> avg_pool2d(const Var<T>& x, int k) {
  const auto& xs = x.shape();
  if (xs.size() != 3 || xs[1] % k != 0 || xs[2] % k != 0)
    throw ShapeError("avg_pool2d: shape " + shape_str(xs) + " with window " + std::to_string(k));
  const int64_t c = xs[0], ho = xs[1] / k, wo = xs[2] / k, hin = xs[1], win = xs[2];
  Tensor<T> out({c, ho, wo});
  const T* px = x.value().data();
  T* po = out.data();
  const T inv = T(1) / static_cast<T>(k * k);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < ho; ++i)
      for (int64_t j = 0; j < wo; ++j) {
        T s = 0;
        for (int64_t a = 0; a < k; ++a)
          for (int64_t b = 0; b < k; ++b) s += px[(ch * hin + i * k + a) * win + j * k + b];
        po[(ch * ho + i) * wo + j] = s * inv;
      }
  return detail::make_op<T>("avg_pool2d", std::move(out), {x},
                            [c, ho, wo, hin, win, k, inv](Node<T>& nd) {
                              Tensor<T> gx({c, hin, win});
                              const T* g = nd.grad.data();
                              T* p = gx.data();
                              for (int64_t ch = 0; ch < c; ++ch)
                                for (int64_t i = 0; i < ho; ++i)
                                  for (int64_t j = 0; j < wo; ++j) {
                                    const T gv = g[(ch * ho + i) * wo + j] * inv;
                                    for (int64_t a = 0; a < k; ++a)
                                      for (int64_t b = 0; b < k; ++b)
                                        p[(ch * hin + i * k + a) * win + j * k + b] += gv;
                                  }
                              nd.inputs[0]->accum_grad(gx);
                            });
}

// ---------------------------------------------------------------------------
// Dropout, detach
// ---------------------------------------------------------------------------

template <typename T>
Var<T> dropout(const Var<T>& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw ValueError("dropout: rate must be < 1");
  const int64_t n = x.value().numel();
  Tensor<T> mask(x.shape());
  T* pm = mask.data();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (int64_t i = 0; i < n; ++i) pm[i] = rng.uniform() < p ? T(0) : keep_scale;
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = px[i] * pm[i];
  return detail::make_op<T>("dropout", std::move(out), {x}, [mask](Node<T>& nd) {
    Tensor<T> gx(nd.grad.shape());
    const T* g = nd.grad.data();
    const T* pm = mask.data();
    T* p = gx.data();
    for (int64_t i = 0; i < gx.numel(); ++i) p[i] = g[i] * pm[i];
    nd.inputs[0]->accum_grad(gx);
  });
}

// Value passes through; gradients do not.
template <typename T>
Var<T> detach(const Var<T>& x) {
  return Var<T>::constant(x.value());
}

// ---------------------------------------------------------------------------
// Composite helpers
// ---------------------------------------------------------------------------

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  return mean_all(square(sub(a, b)));
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Var<T>& loss) {
  if (loss.value().numel() != 1)
    throw ValueError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  auto root = loss.node();
  if (!root->requires_grad)
    throw ValueError("backward: no graph recorded (loss does not require grad)");
  if (root->backward_ran)
    throw ValueError("backward: called twice on the same graph without re-recording");
  root->backward_ran = true;

  // Iterative post-order topological sort.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->accum_grad(Tensor<T>::full({1}, T(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn && node->has_grad()) node->backward_fn(*node);
  }
}

}  // namespace triplex
