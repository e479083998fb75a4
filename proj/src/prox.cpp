#include "slr/prox.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace slr {
namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void rotate_rows(Matrix& m, std::size_t p, std::size_t q, double c, double s) {
  auto rp = m.row(p);
  auto rq = m.row(q);
  for (std::size_t i = 0; i < rp.size(); ++i) {
    const double x = rp[i];
    const double y = rq[i];
    rp[i] = c * x - s * y;
    rq[i] = s * x + c * y;
  }
}

// Orthogonalize the rows of `g` by plane rotations, applying the same
// rotations to the rows of `acc`.
void jacobi_rows(Matrix& g, Matrix& acc, int max_sweeps) {
  constexpr double kTol = 1e-15;
  constexpr double kNegligible = 1e-300;
  const std::size_t k = g.rows();
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < k; ++p) {
      for (std::size_t q = p + 1; q < k; ++q) {
        const double alpha = dot(g.row(p), g.row(p));
        const double beta = dot(g.row(q), g.row(q));
        const double gamma = dot(g.row(p), g.row(q));
        // Rows this small (inputs are scaled to max |entry| ~ 1) are numerically zero.
        if (alpha <= kNegligible || beta <= kNegligible) continue;
        if (std::abs(gamma) <= kTol * std::sqrt(alpha) * std::sqrt(beta)) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
        const double c = 1.0 / std::hypot(1.0, t);
        const double s = c * t;
        rotate_rows(g, p, q, c, s);
        rotate_rows(acc, p, q, c, s);
        rotated = true;
      }
    }
    if (!rotated) return;
  }
  double off = 0.0;
  for (std::size_t p = 0; p + 1 < k; ++p)
    for (std::size_t q = p + 1; q < k; ++q) off = std::max(off, std::abs(dot(g.row(p), g.row(q))));
  std::ostringstream msg;
  msg << "SVD did not converge after " << max_sweeps << " sweeps (max off-diagonal " << off << ")";
  throw SvdConvergenceError(msg.str(), g);
}

// Rows of g = r^T q with orthonormal (or zero) rows in q: returns {q, r^T}.
// Gram-Schmidt with one reorthogonalization pass.
std::pair<Matrix, Matrix> row_qr(const Matrix& g) {
  const std::size_t k = g.rows();
  const std::size_t len = g.cols();
  Matrix q(k, len);
  Matrix rt(k, k);
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<double> v(g.row(j).begin(), g.row(j).end());
    const double original = std::sqrt(dot(v, v));
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t i = 0; i < j; ++i) {
        const double proj = dot(q.row(i), v);
        rt(j, i) += proj;
        const auto qi = q.row(i);
        for (std::size_t x = 0; x < len; ++x) v[x] -= proj * qi[x];
      }
    }
    const double norm = std::sqrt(dot(v, v));
    if (norm > 1e-14 * original && norm > 0.0) {
      rt(j, j) = norm;
      auto qj = q.row(j);
      for (std::size_t x = 0; x < len; ++x) qj[x] = v[x] / norm;
    }
  }
  return {std::move(q), std::move(rt)};
}

}  // namespace

Matrix SvdResult::reconstruct() const {
  Matrix scaled = u;
  for (std::size_t r = 0; r < scaled.rows(); ++r)
    for (std::size_t c = 0; c < scaled.cols(); ++c) scaled(r, c) *= singular_values[c];
  return matmul(scaled, v);
}

SvdResult svd(const Matrix& a, int max_sweeps) {
  if (!all_finite(a)) throw NumericalError("svd: input contains non-finite values");
  const bool tall = a.rows() >= a.cols();
  // Rows of `g` are the vectors to orthogonalize: columns of a when tall, rows when wide.
  Matrix g = tall ? a.transposed() : a;
  // Exact power-of-two scaling to max |entry| in [0.5, 1) keeps the sweeps
  // away from underflow and overflow.
  int exponent = 0;
  const double peak = max_abs(a);
  if (peak > 0.0) {
    std::frexp(peak, &exponent);
    for (double& v : g.data()) v = std::ldexp(v, -exponent);
  }
  const std::size_t k = g.rows();
  Matrix acc = Matrix::identity(k);

  if (g.cols() > 2 * k) {
    auto [q, rt] = row_qr(g);
    jacobi_rows(rt, acc, max_sweeps);
    g = matmul(rt, q);
  } else {
    jacobi_rows(g, acc, max_sweeps);
  }

  std::vector<double> norms(k);
  for (std::size_t j = 0; j < k; ++j) norms[j] = std::sqrt(dot(g.row(j), g.row(j)));
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  // g row j = sigma_j * (left vector when tall, right vector when wide);
  // acc row j = the matching vector on the other side.
  SvdResult out;
  out.singular_values.resize(k);
  out.u = Matrix(a.rows(), k);
  out.v = Matrix(k, a.cols());
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t src = order[j];
    const double sigma = norms[src];
    out.singular_values[j] = std::ldexp(sigma, exponent);
    const auto grow = g.row(src);
    const auto arow = acc.row(src);
    if (tall) {
      for (std::size_t i = 0; i < a.rows(); ++i) out.u(i, j) = sigma > 0.0 ? grow[i] / sigma : 0.0;
      for (std::size_t i = 0; i < a.cols(); ++i) out.v(j, i) = arow[i];
    } else {
      for (std::size_t i = 0; i < a.cols(); ++i) out.v(j, i) = sigma > 0.0 ? grow[i] / sigma : 0.0;
      for (std::size_t i = 0; i < a.rows(); ++i) out.u(i, j) = arow[i];
    }
  }
  return out;
}

Matrix prox_l21(const Matrix& c, double threshold) {
  if (!(threshold > 0.0)) throw ConfigError("prox_l21: threshold must be positive");
  Matrix out(c.rows(), c.cols());
  const std::vector<double> norms = column_norms(c);
  for (std::size_t j = 0; j < c.cols(); ++j) {
    // Ties at the threshold take the zero branch.
    if (!(norms[j] > threshold)) continue;
    const double scale = (norms[j] - threshold) / norms[j];
    for (std::size_t i = 0; i < c.rows(); ++i) out(i, j) = scale * c(i, j);
  }
  return out;
}

SvtResult svt(const Matrix& d, double threshold) {
  if (!(threshold > 0.0)) throw ConfigError("svt: threshold must be positive");
  SvdResult full = svd(d);
  std::size_t keep = 0;
  while (keep < full.rank() && full.singular_values[keep] > threshold) ++keep;

  SvtResult out;
  out.factors.u = Matrix(d.rows(), keep);
  out.factors.v = Matrix(keep, d.cols());
  out.factors.singular_values.resize(keep);
  for (std::size_t j = 0; j < keep; ++j) {
    out.factors.singular_values[j] = full.singular_values[j] - threshold;
    for (std::size_t i = 0; i < d.rows(); ++i) out.factors.u(i, j) = full.u(i, j);
    for (std::size_t i = 0; i < d.cols(); ++i) out.factors.v(j, i) = full.v(j, i);
  }
  out.b = keep == 0 ? Matrix(d.rows(), d.cols()) : out.factors.reconstruct();
  return out;
}

double nuclear_norm(const Matrix& a) {
  const SvdResult s = svd(a);
  return std::accumulate(s.singular_values.begin(), s.singular_values.end(), 0.0);
}

}  // namespace slr
