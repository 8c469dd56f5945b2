#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <vector>

#include "triplex/common.hpp"

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace triplex {

// Kernel parallelism is opt-in: the static partitioning keeps results
// bit-identical for any thread count, but on small matrices the fork/join
// cost dwarfs the work, so everything stays serial until a caller raises it.
namespace detail {
inline int& compute_threads_ref() {
  static int n = 1;
  return n;
}
}  // namespace detail

inline int compute_threads() { return detail::compute_threads_ref(); }

inline void set_compute_threads(int n) {
  detail::compute_threads_ref() = n < 1 ? 1 : n;
#if defined(_OPENMP)
  omp_set_num_threads(detail::compute_threads_ref());
#endif
}

#if defined(_OPENMP)
#define TRIPLEX_PRAGMA_(x) _Pragma(#x)
#define TRIPLEX_PARALLEL_FOR \
  TRIPLEX_PRAGMA_(omp parallel for schedule(static) if (::triplex::compute_threads() > 1))
#else
#define TRIPLEX_PARALLEL_FOR
#endif

// Dense N-d array of real values. Storage is shared between copies and must be
// treated as immutable once a tensor has been handed to another component;
// mutable access exists only for the construction phase of an owner.
template <typename T>
class Tensor {
 public:
  using Shape = std::vector<int64_t>;

  Tensor() : data_(std::make_shared<std::vector<T>>()) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(checked_numel(shape_), T(0))) {}

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
    if (static_cast<int64_t>(data_->size()) != checked_numel(shape_))
      throw ShapeError("tensor: " + std::to_string(data_->size()) + " values for shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  int64_t dim(size_t i) const { return shape_.at(i); }
  int64_t numel() const { return static_cast<int64_t>(data_->size()); }
  bool empty() const { return data_->empty(); }

  const T* data() const { return data_->data(); }
  T* data() { return data_->data(); }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor has shape " + shape_str(shape_));
    return (*data_)[0];
  }

  T operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  T at2(int64_t i, int64_t j) const { return (*data_)[static_cast<size_t>(i * shape_[1] + j)]; }
  T& at2(int64_t i, int64_t j) { return (*data_)[static_cast<size_t>(i * shape_[1] + j)]; }

  // Zero-copy view with a new shape over the same storage.
  Tensor reshaped(Shape new_shape) const {
    if (checked_numel(new_shape) != numel())
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(new_shape));
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (T v : *data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_->size());
    for (size_t i = 0; i < data_->size(); ++i) out[i] = static_cast<U>((*data_)[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  static int64_t checked_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      if (d < 1) throw ShapeError("tensor: non-positive dimension in " + shape_str(s));
      n *= d;
    }
    return n;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
};

// ---- Raw kernels shared by forward and backward passes. ----
// All loops write each output element from exactly one iteration (or one
// thread), so results are bit-identical for any thread count.

// C += A(n,k) * B(k,m)
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int64_t n, int64_t k, int64_t m) {
  TRIPLEX_PARALLEL_FOR
  for (int64_t i = 0; i < n; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * m;
    for (int64_t p = 0; p < k; ++p) {
      T av = arow[p];
      const T* brow = b + p * m;
      for (int64_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A(n,k) * B(m,k)^T
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, int64_t n, int64_t k, int64_t m) {
  TRIPLEX_PARALLEL_FOR
  for (int64_t i = 0; i < n; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * m;
    for (int64_t j = 0; j < m; ++j) {
      const T* brow = b + j * k;
      T s = 0;
      for (int64_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

// C(k,m) += A(n,k)^T * B(n,m)
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, int64_t n, int64_t k, int64_t m) {
  TRIPLEX_PARALLEL_FOR
  for (int64_t p = 0; p < k; ++p) {
    T* crow = c + p * m;
    for (int64_t i = 0; i < n; ++i) {
      T av = a[i * k + p];
      const T* brow = b + i * m;
      for (int64_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace triplex
