#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace slr {

/// Dense row-major matrix of doubles.
///
/// Carries every weight, feature-map and multiplier in the solver. Empty
/// extents (0 rows or 0 columns) are allowed so that rank-0 factors and
/// column-packed blocks with no surviving column have a natural value.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double> column(std::size_t c) const;
  void set_column(std::size_t c, std::span<const double> values);

  Matrix transposed() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);

/// C = A * B. `threads` > 1 splits output rows across worker threads; the
/// per-element reduction order does not depend on the thread count.
Matrix matmul(const Matrix& a, const Matrix& b, unsigned threads = 1);

/// C = A * B^T.
Matrix matmul_bt(const Matrix& a, const Matrix& b);

/// C = A^T * B.
Matrix matmul_at(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& a);
double squared_frobenius(const Matrix& a);
double inner(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& a);
bool all_finite(const Matrix& a);

/// Euclidean norm of every column.
std::vector<double> column_norms(const Matrix& a);

/// max |a - b| / max(max |b|, tiny); infinite when any entry is not finite.
double max_relative_error(const Matrix& a, const Matrix& b);

void require_same_shape(const Matrix& a, const Matrix& b, const char* what);

}  // namespace slr
