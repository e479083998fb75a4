#include "slr/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <thread>

#include "slr/errors.hpp"

namespace slr {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length does not match " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> values) {
  Matrix m(values.size(), values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
  return m;
}

std::vector<double> Matrix::column(std::size_t c) const {
  std::vector<double> out(rows_);
  for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
  return out;
}

void Matrix::set_column(std::size_t c, std::span<const double> values) {
  for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = values[r];
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix& Matrix::operator+=(const Matrix& other) {
  require_same_shape(*this, other, "matrix addition");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  require_same_shape(*this, other, "matrix subtraction");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }
Matrix operator*(double s, Matrix a) { return a *= s; }

namespace {

// Rows [row_begin, row_end) of C = A * B, i-k-j order so the innermost loop
// streams contiguous rows of B and C.
void gemm_rows(const Matrix& a, const Matrix& b, Matrix& c, std::size_t row_begin,
               std::size_t row_end) {
  constexpr std::size_t kBlock = 256;
  const std::size_t inner = a.cols();
  const std::size_t n = b.cols();
  for (std::size_t k0 = 0; k0 < inner; k0 += kBlock) {
    const std::size_t k1 = std::min(inner, k0 + kBlock);
    for (std::size_t i = row_begin; i < row_end; ++i) {
      double* crow = c.row(i).data();
      const double* arow = a.row(i).data();
      for (std::size_t k = k0; k < k1; ++k) {
        const double aik = arow[k];
        if (aik == 0.0) continue;
        const double* brow = b.row(k).data();
        for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
      }
    }
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b, unsigned threads) {
  if (a.cols() != b.rows()) {
    std::ostringstream msg;
    msg << "matmul: " << a.rows() << "x" << a.cols() << " times " << b.rows() << "x" << b.cols();
    throw ShapeError(msg.str());
  }
  Matrix c(a.rows(), b.cols());
  const std::size_t rows = a.rows();
  if (threads <= 1 || rows < 2 * threads) {
    gemm_rows(a, b, c, 0, rows);
    return c;
  }
  std::vector<std::jthread> workers;
  const std::size_t chunk = (rows + threads - 1) / threads;
  for (std::size_t begin = 0; begin < rows; begin += chunk) {
    const std::size_t end = std::min(rows, begin + chunk);
    workers.emplace_back([&, begin, end] { gemm_rows(a, b, c, begin, end); });
  }
  return c;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_bt: inner dimensions differ");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < arow.size(); ++k) s += arow[k] * brow[k];
      c(i, j) = s;
    }
  }
  return c;
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_at: inner dimensions differ");
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const auto arow = a.row(k);
    const auto brow = b.row(k);
    for (std::size_t i = 0; i < arow.size(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* crow = c.row(i).data();
      for (std::size_t j = 0; j < brow.size(); ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

double squared_frobenius(const Matrix& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return s;
}

double frobenius_norm(const Matrix& a) { return std::sqrt(squared_frobenius(a)); }

double inner(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "inner product");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

bool all_finite(const Matrix& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](double v) { return std::isfinite(v); });
}

std::vector<double> column_norms(const Matrix& a) {
  std::vector<double> norms(a.cols(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto row = a.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) norms[c] += row[c] * row[c];
  }
  for (double& n : norms) n = std::sqrt(n);
  return norms;
}

double max_relative_error(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "relative error");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a.data()[i] - b.data()[i]);
    // NaN or infinite entries never count as agreement.
    if (!std::isfinite(d)) return std::numeric_limits<double>::infinity();
    diff = std::max(diff, d);
  }
  return diff / std::max(max_abs(b), std::numeric_limits<double>::min());
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    std::ostringstream msg;
    msg << what << ": shape " << a.rows() << "x" << a.cols() << " vs " << b.rows() << "x"
        << b.cols();
    throw ShapeError(msg.str());
  }
}

}  // namespace slr
