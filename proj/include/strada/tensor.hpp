#pragma once

// Dense row-major tensors and the forward versions of the core numeric ops.
// Differentiable counterparts live in autograd.hpp.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include "strada/error.hpp"

namespace strada {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

namespace detail {

// 64-byte aligned storage that value-constructs only when given a value, so
// sized construction of arithmetic elements skips the zero fill. The fixed
// alignment keeps vectorized kernels on the same code path for every buffer.
template <typename T>
struct DefaultInitAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  DefaultInitAllocator() = default;
  template <typename U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }
  template <typename U>
  bool operator==(const DefaultInitAllocator<U>&) const noexcept { return true; }

  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

}  // namespace detail

// Tag for outputs that the caller overwrites completely.
struct Uninitialized {};
inline constexpr Uninitialized uninitialized{};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, Uninitialized) : shape_(std::move(shape)), data_(shape_size(shape_)) {}
  Tensor(Shape shape, const std::vector<T>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T{0}) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // 2-D view helpers. A rank-1 tensor is treated as a single row.
  std::size_t rows() const noexcept {
    return shape_.size() >= 2 ? shape_[0] : 1;
  }
  std::size_t cols() const noexcept {
    if (shape_.empty()) return 1;
    return shape_.size() >= 2 ? size() / shape_[0] : shape_[0];
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  MatrixMap<T> mat() { return MatrixMap<T>(data_.data(), rows(), cols()); }
  ConstMatrixMap<T> mat() const { return ConstMatrixMap<T>(data_.data(), rows(), cols()); }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    Tensor out(std::move(shape), uninitialized);
    std::copy(data_.begin(), data_.end(), out.data_.begin());
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_, uninitialized);
    std::copy(data_.begin(), data_.end(), out.data().begin());
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T, detail::DefaultInitAllocator<T>> data_;
};

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

inline void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_str(s));
  }
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& a, F&& f) {
  Tensor<T> out(a.shape(), uninitialized);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace detail

// Scalar special functions. Boost's lgamma is reentrant (glibc's writes signgam).
template <typename T>
T log_gamma(T x) {
  return static_cast<T>(boost::math::lgamma(static_cast<double>(x)));
}
template <typename T>
T digamma(T x) {
  return static_cast<T>(boost::math::digamma(static_cast<double>(x)));
}
template <typename T>
T softplus(T x) {
  // log(1 + e^x) without overflow for large x.
  return x > T{0} ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
template <typename T>
T logistic(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a.shape(), "matmul");
  detail::require_rank2(b.shape(), "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor<T> out({a.dim(0), b.dim(1)}, uninitialized);
  out.mat().noalias() = a.mat() * b.mat();
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape(), uninitialized);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape(), uninitialized);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::map(a, [](T x) { return std::log(x); });
}
template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::map(a, [](T x) { return std::exp(x); });
}
template <typename T>
Tensor<T> lgamma(const Tensor<T>& a) {
  return detail::map(a, [](T x) { return log_gamma(x); });
}
template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return detail::map(a, [](T x) { return softplus(x); });
}

// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.rank() == 0) throw DimensionError("softmax: scalar input");
  const std::size_t width = a.shape().back();
  Tensor<T> out(a.shape());
  if (width == 0) return out;
  for (std::size_t base = 0; base < a.size(); base += width) {
    T hi = a[base];
    for (std::size_t j = 1; j < width; ++j) hi = std::max(hi, a[base + j]);
    T sum = 0;
    for (std::size_t j = 0; j < width; ++j) {
      out[base + j] = std::exp(a[base + j] - hi);
      sum += out[base + j];
    }
    for (std::size_t j = 0; j < width; ++j) out[base + j] /= sum;
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank2(a.shape(), "transpose");
  Tensor<T> out({a.dim(1), a.dim(0)});
  out.mat() = a.mat().transpose();
  return out;
}

// Rows [begin, end) along axis 0.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0 || begin > end || end > a.dim(0)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of bounds for shape " + shape_str(a.shape()));
  }
  Shape shape = a.shape();
  shape[0] = end - begin;
  const std::size_t stride = a.size() / std::max<std::size_t>(a.dim(0), 1);
  std::vector<T> data(a.data().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                      a.data().begin() + static_cast<std::ptrdiff_t>(end * stride));
  return Tensor<T>(std::move(shape), std::move(data));
}

// Concatenate two matrices along axis 0 (rows) or 1 (columns).
template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
  detail::require_rank2(a.shape(), "concat");
  detail::require_rank2(b.shape(), "concat");
  if (axis == 0) {
    if (a.dim(1) != b.dim(1)) {
      throw DimensionError("concat: shape mismatch " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
    }
    Tensor<T> out({a.dim(0) + b.dim(0), a.dim(1)});
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    std::copy(b.data().begin(), b.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
    return out;
  }
  if (axis != 1) throw DimensionError("concat: axis must be 0 or 1");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("concat: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor<T> out({a.dim(0), a.dim(1) + b.dim(1)});
  out.mat().leftCols(a.dim(1)) = a.mat();
  out.mat().rightCols(b.dim(1)) = b.mat();
  return out;
}

}  // namespace strada
