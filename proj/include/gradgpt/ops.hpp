#pragma once

// Matrix kernels the layer equations are written in.
//
// All reductions accumulate left to right over the contracted index so that
// results are bit-reproducible across runs.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "gradgpt/matrix.hpp"

namespace gradgpt {

/// Lower-triangular selector: entry (i, j) is 1 iff j <= i.
struct CausalMask {
  std::size_t size = 0;

  bool allows(std::size_t i, std::size_t j) const { return j <= i; }
  int entry(std::size_t i, std::size_t j) const { return allows(i, j) ? 1 : 0; }
};

namespace detail {

template <typename T>
void require_same_shape(const char* op, const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

}  // namespace detail

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + a.shape() + " x " + b.shape());
  }
  Matrix<T> out(a.rows(), b.cols());
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* dst = out.data() + i * m;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      const T* src = b.data() + k * m;
      for (std::size_t j = 0; j < m; ++j) dst[j] += aik * src[j];
    }
  }
  return out;
}

/// a^t * b without materializing the transpose.
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: row counts differ, " + a.shape() + "^t x " + b.shape());
  }
  Matrix<T> out(a.cols(), b.cols());
  const std::size_t m = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const T* src = b.data() + k * m;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T aki = a(k, i);
      T* dst = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) dst[j] += aki * src[j];
    }
  }
  return out;
}

/// a * b^t without materializing the transpose.
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: column counts differ, " + a.shape() + " x " + b.shape() + "^t");
  }
  Matrix<T> out(a.rows(), b.rows());
  const std::size_t k_len = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* ai = a.data() + i * k_len;
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const T* bj = b.data() + j * k_len;
      T acc = T(0);
      for (std::size_t k = 0; k < k_len; ++k) acc += ai[k] * bj[k];
      out(i, j) = acc;
    }
  }
  return out;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_same_shape("hadamard", a, b);
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

/// Sum of elementwise products, i.e. Tr(a^t b).
template <typename T>
T frobenius_dot(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_same_shape("frobenius_dot", a, b);
  T acc = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i] * b.data()[i];
  return acc;
}

/// Row-wise dot product: component t is row t of a dotted with row t of b.
template <typename T>
Vector<T> feature_dot(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_same_shape("feature_dot", a, b);
  Vector<T> out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T acc = T(0);
    for (std::size_t j = 0; j < a.cols(); ++j) acc += a(i, j) * b(i, j);
    out[i] = acc;
  }
  return out;
}

/// Every row equals v (feature-space broadcast, e.g. a bias).
template <typename T>
Matrix<T> broadcast_row(const Vector<T>& v, std::size_t n) {
  Matrix<T> out(n, v.size());
  for (std::size_t i = 0; i < n; ++i) std::copy(v.values().begin(), v.values().end(), out.row(i).begin());
  return out;
}

/// Every column equals v (token-space broadcast, e.g. per-token mean).
template <typename T>
Matrix<T> broadcast_col(const Vector<T>& v, std::size_t f) {
  Matrix<T> out(v.size(), f);
  for (std::size_t i = 0; i < v.size(); ++i) std::fill(out.row(i).begin(), out.row(i).end(), v[i]);
  return out;
}

/// Column sums (the vertical sum that cuts across tokens).
template <typename T>
Vector<T> sum_over_tokens(const Matrix<T>& a) {
  Vector<T> out(a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out[j] += a(i, j);
  return out;
}

/// Row-wise softmax. With a mask, entries j > i are exactly zero and do not
/// take part in the normalization; each row is shifted by the maximum over
/// its visible entries before exponentiation.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& a, std::optional<CausalMask> mask = std::nullopt) {
  if (mask && (a.rows() != a.cols() || mask->size != a.rows())) {
    throw ShapeError("softmax_rows: causal mask of size " + std::to_string(mask->size) +
                     " does not fit " + a.shape());
  }
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const std::size_t visible = mask ? i + 1 : a.cols();
    T peak = a(i, 0);
    for (std::size_t j = 1; j < visible; ++j) peak = std::max(peak, a(i, j));
    T total = T(0);
    for (std::size_t j = 0; j < visible; ++j) {
      const T e = std::exp(a(i, j) - peak);
      out(i, j) = e;
      total += e;
    }
    for (std::size_t j = 0; j < visible; ++j) out(i, j) /= total;
  }
  return out;
}

template <typename T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_same_shape("add", a, b);
  Matrix<T> out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

template <typename T>
Matrix<T> subtract(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_same_shape("subtract", a, b);
  Matrix<T> out = a;
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

template <typename T>
Matrix<T> scale(const Matrix<T>& a, T s) {
  Matrix<T> out = a;
  for (auto& x : out.values()) x *= s;
  return out;
}

template <typename T>
void add_into(Matrix<T>& dst, const Matrix<T>& src) {
  detail::require_same_shape("add_into", dst, src);
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

template <typename T>
void add_into(Vector<T>& dst, const Vector<T>& src) {
  if (dst.size() != src.size()) throw ShapeError("add_into: vector lengths differ");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

/// Columns [first, first + count) of a.
template <typename T>
Matrix<T> slice_cols(const Matrix<T>& a, std::size_t first, std::size_t count) {
  if (count == 0 || first + count > a.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(first) + ", " +
                     std::to_string(first + count) + ") out of " + a.shape());
  }
  Matrix<T> out(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = a(i, first + j);
  return out;
}

/// Writes block into the columns of dst starting at first.
template <typename T>
void set_cols(Matrix<T>& dst, std::size_t first, const Matrix<T>& block) {
  if (block.rows() != dst.rows() || first + block.cols() > dst.cols()) {
    throw ShapeError("set_cols: block " + block.shape() + " does not fit " + dst.shape());
  }
  for (std::size_t i = 0; i < dst.rows(); ++i)
    for (std::size_t j = 0; j < block.cols(); ++j) dst(i, first + j) = block(i, j);
}

template <typename T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_same_shape("max_abs_diff", a, b);
  T worst = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

}  // namespace gradgpt
