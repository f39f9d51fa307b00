#pragma once

// Dense row-major storage used by every layer.
//
// Indices are 0-based throughout: token t of a sequence is row t, feature f
// is column f.

#include <cstddef>
#include <initializer_list>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gradgpt {

/// Raised whenever operand shapes do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

/// Records the largest row count of every Matrix allocated on this thread
/// while a probe is installed. Used to check that single-token decoding
/// never materializes a sequence-by-sequence matrix.
struct AllocationStats {
  std::size_t allocations = 0;
  std::size_t max_rows = 0;
};

inline thread_local AllocationStats* active_probe = nullptr;

inline void note_allocation(std::size_t rows) {
  if (active_probe != nullptr) {
    ++active_probe->allocations;
    if (rows > active_probe->max_rows) active_probe->max_rows = rows;
  }
}

}  // namespace detail

class AllocationProbe {
 public:
  AllocationProbe() : previous_(detail::active_probe) { detail::active_probe = &stats_; }
  ~AllocationProbe() { detail::active_probe = previous_; }
  AllocationProbe(const AllocationProbe&) = delete;
  AllocationProbe& operator=(const AllocationProbe&) = delete;

  const detail::AllocationStats& stats() const { return stats_; }

 private:
  detail::AllocationStats stats_;
  detail::AllocationStats* previous_;
};

template <typename T>
class Vector;

template <typename T>
class Matrix {
 public:
  using value_type = T;

  /// Empty placeholder; only valid as a target for assignment.
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, T fill = T(0)) : rows_(rows), cols_(cols) {
    if (rows == 0 || cols == 0) {
      throw ShapeError("matrix dimensions must be positive, got " + shape_string(rows, cols));
    }
    detail::note_allocation(rows);
    data_.assign(rows * cols, fill);
  }

  Matrix(std::initializer_list<std::initializer_list<T>> init) {
    rows_ = init.size();
    cols_ = rows_ ? init.begin()->size() : 0;
    if (rows_ == 0 || cols_ == 0) throw ShapeError("matrix literal must be non-empty");
    detail::note_allocation(rows_);
    data_.reserve(rows_ * cols_);
    for (const auto& row : init) {
      if (row.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  Matrix(const Matrix& other) : rows_(other.rows_), cols_(other.cols_), data_(other.data_) {
    if (!data_.empty()) detail::note_allocation(rows_);
  }
  Matrix(Matrix&&) noexcept = default;
  Matrix& operator=(const Matrix& other) {
    if (this != &other) {
      if (!other.data_.empty()) detail::note_allocation(other.rows_);
      rows_ = other.rows_;
      cols_ = other.cols_;
      data_ = other.data_;
    }
    return *this;
  }
  Matrix& operator=(Matrix&&) noexcept = default;

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  std::string shape() const { return shape_string(rows_, cols_); }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  static std::string shape_string(std::size_t r, std::size_t c) {
    std::ostringstream os;
    os << '[' << r << 'x' << c << ']';
    return os.str();
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <typename T>
class Vector {
 public:
  using value_type = T;

  Vector() = default;

  explicit Vector(std::size_t len, T fill = T(0)) {
    if (len == 0) throw ShapeError("vector length must be positive");
    data_.assign(len, fill);
  }

  Vector(std::initializer_list<T> init) : data_(init) {
    if (data_.empty()) throw ShapeError("vector literal must be non-empty");
  }

  explicit Vector(std::vector<T> values) : data_(std::move(values)) {
    if (data_.empty()) throw ShapeError("vector length must be positive");
  }

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  friend bool operator==(const Vector& a, const Vector& b) { return a.data_ == b.data_; }

 private:
  std::vector<T> data_;
};

template <typename T>
std::ostream& operator<<(std::ostream& os, const Matrix<T>& m) {
  os << m.shape() << '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) os << (c ? " " : "") << m(r, c);
    os << '\n';
  }
  return os;
}

}  // namespace gradgpt
