#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lorank/dual.hpp"
#include "lorank/errors.hpp"

namespace lorank {

/// Dense row-major matrix. Vectors are 1×k or k×1; scalars are 1×1.
template <class T = double>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(rows, cols));
    }
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged initializer rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(r, c, std::move(data));
  }

  static Tensor row_vector(std::vector<T> values) {
    const std::size_t n = values.size();
    return Tensor(1, n, std::move(values));
  }

  static Tensor scalar(T v) { return Tensor(1, 1, v); }

  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T(1.0);
    return t;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  bool same_shape(const Tensor& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape() const { return shape_string(rows_, cols_); }

  T item() const {
    if (rows_ != 1 || cols_ != 1) throw DimensionError("item() on non-scalar " + shape());
    return data_[0];
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  static std::string shape_string(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

template <class T>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, const char* op, auto f) {
  require_same_shape(a, b, op);
  Tensor<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <class T>
Tensor<T> map(const Tensor<T>& a, auto f) {
  Tensor<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace detail

// Value-level kernels. The traced versions in tape.hpp call these, so forward
// values are identical whether or not a tape is recording.

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: shape mismatch " + a.shape() + " x " + b.shape());
  }
  Tensor<T> out(a.rows(), b.cols());
  const std::size_t n = a.cols();
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t p = 0; p < n; ++p) {
      const T aip = a(i, p);
      for (std::size_t j = 0; j < m; ++j) out(i, j) += aip * b(p, j);
    }
  }
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "add", [](const T& x, const T& y) { return x + y; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "sub", [](const T& x, const T& y) { return x - y; });
}

template <class T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "hadamard", [](const T& x, const T& y) { return x * y; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, double s) {
  return detail::map(a, [s](const T& x) { return x * T(s); });
}

// a + s·b, in place.
template <class T>
void axpy(Tensor<T>& a, double s, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "axpy");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += T(s) * b[i];
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  Tensor<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::map(a, [](const T& x) { return value_of(x) > 0.0 ? x : T(0.0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  using std::exp;
  return detail::map(a, [](const T& x) { return T(1.0) / (T(1.0) + exp(-x)); });
}

template <class T>
Tensor<T> row_softmax(const Tensor<T>& a) {
  using std::exp;
  Tensor<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    if (a.cols() == 0) continue;
    T mx = a(i, 0);
    for (std::size_t j = 1; j < a.cols(); ++j)
      if (value_of(a(i, j)) > value_of(mx)) mx = a(i, j);
    T total(0.0);
    for (std::size_t j = 0; j < a.cols(); ++j) {
      out(i, j) = exp(a(i, j) - mx);
      total += out(i, j);
    }
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) /= total;
  }
  return out;
}

template <class T>
Tensor<T> mean_pool_rows(const Tensor<T>& a) {
  if (a.rows() == 0) throw DimensionError("mean_pool_rows: no rows");
  Tensor<T> out(1, a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(0, j) += a(i, j);
  const T inv(1.0 / static_cast<double>(a.rows()));
  for (std::size_t j = 0; j < a.cols(); ++j) out(0, j) *= inv;
  return out;
}

// 1×k (or k×1) vector to k×k diagonal matrix.
template <class T>
Tensor<T> diag(const Tensor<T>& v) {
  if (v.rows() != 1 && v.cols() != 1) throw DimensionError("diag: expected a vector, got " + v.shape());
  Tensor<T> out(v.size(), v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out(i, i) = v[i];
  return out;
}

// x (N×n) plus the row vector b (1×n) added to every row. Explicit, not broadcasting.
template <class T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw DimensionError("add_row: shape mismatch " + x.shape() + " + row " + b.shape());
  }
  Tensor<T> out = x;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) += b(0, j);
  return out;
}

template <class T>
T sum_all(const Tensor<T>& a) {
  T s(0.0);
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
  return s;
}

template <class T>
double frobenius_norm(const Tensor<T>& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += value_of(a[i]) * value_of(a[i]);
  return std::sqrt(s);
}

template <class T>
bool all_finite(const Tensor<T>& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](const T& x) { return is_finite(x); });
}

template <class T>
Tensor<T> lift(const Tensor<double>& a) {
  Tensor<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = T(a[i]);
  return out;
}

inline Tensor<double> values(const Tensor<Dual>& a) {
  Tensor<double> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i].val;
  return out;
}

inline Tensor<double> tangents(const Tensor<Dual>& a) {
  Tensor<double> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i].eps;
  return out;
}

inline Tensor<Dual> with_tangent(const Tensor<double>& value, const Tensor<double>& tangent) {
  detail::require_same_shape(value, tangent, "with_tangent");
  Tensor<Dual> out(value.rows(), value.cols());
  for (std::size_t i = 0; i < value.size(); ++i) out[i] = Dual(value[i], tangent[i]);
  return out;
}

// Rows [begin, end) of a.
template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) throw DimensionError("slice_rows out of range for " + a.shape());
  Tensor<T> out(end - begin, a.cols());
  std::copy(a.data().begin() + static_cast<std::ptrdiff_t>(begin * a.cols()),
            a.data().begin() + static_cast<std::ptrdiff_t>(end * a.cols()), out.data().begin());
  return out;
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> idx) {
  Tensor<T> out(idx.size(), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= a.rows()) throw DimensionError("gather_rows index out of range");
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(idx[i], j);
  }
  return out;
}

}  // namespace lorank
