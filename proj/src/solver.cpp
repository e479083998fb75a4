#include "slr/solver.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace slr {

void SgdConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("sgd: learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("sgd: momentum must be in [0, 1)");
  if (epochs < 1) throw ConfigError("sgd: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("sgd: batch_size must be >= 1");
}

namespace {

void check_terms(const Matrix& m, const MTerms& terms) {
  require_same_shape(m, terms.a_hat, "M-subproblem (A)");
  require_same_shape(m, terms.b_hat, "M-subproblem (B)");
  require_same_shape(m, terms.lambda, "M-subproblem (Lambda)");
  if (!(terms.t > 0.0)) throw ConfigError("penalty t must be positive");
}

void check_sample(const Sample& s, const Matrix& m) {
  if (s.x.rows() != m.cols() || s.y.rows() != m.rows() || s.x.cols() != s.y.cols()) {
    std::ostringstream msg;
    msg << "sample shapes x " << s.x.rows() << "x" << s.x.cols() << ", y " << s.y.rows() << "x"
        << s.y.cols() << " do not fit a " << m.rows() << "x" << m.cols() << " layer";
    throw ShapeError(msg.str());
  }
}

// Adds 2 * [r'(Z) (r(Z) - Y)] X^T for one sample into `grad`, scaled by `weight`.
void accumulate_data_gradient(const Sample& s, const Matrix& m, Activation act, double weight,
                              Matrix& grad) {
  Matrix z = matmul(m, s.x);
  for (std::size_t i = 0; i < z.size(); ++i) {
    double& v = z.data()[i];
    const double y = s.y.data()[i];
    if (act == Activation::relu) {
      v = v > 0.0 ? 2.0 * weight * (v - y) : 0.0;
    } else {
      v = 2.0 * weight * (v - y);
    }
  }
  grad += matmul_bt(z, s.x);
}

// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
Matrix cholesky(const Matrix& g) {
  const std::size_t n = g.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = g(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0)) throw NumericalError("cholesky: matrix is not positive definite");
    l(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = g(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

// Solve (L L^T) x = b in place.
void cholesky_solve(const Matrix& l, std::span<double> b) {
  const std::size_t n = l.rows();
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * b[k];
    b[i] = s / l(i, i);
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * b[k];
    b[i] = s / l(i, i);
  }
}

}  // namespace

double data_term(const std::vector<Sample>& samples, const Matrix& m, Activation act) {
  double total = 0.0;
  for (const Sample& s : samples) {
    check_sample(s, m);
    const Matrix z = activate(matmul(m, s.x), act);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double d = s.y.data()[i] - z.data()[i];
      total += d * d;
    }
  }
  return total;
}

double m_objective(const std::vector<Sample>& samples, const Matrix& m, const MTerms& terms,
                   Activation act) {
  check_terms(m, terms);
  const Matrix gap = terms.a_hat + terms.b_hat - m;
  return data_term(samples, m, act) + inner(terms.lambda, gap) +
         0.5 * terms.t * squared_frobenius(gap);
}

Matrix subgradient_m(const std::vector<Sample>& samples, const Matrix& m, const MTerms& terms,
                     Activation act) {
  check_terms(m, terms);
  Matrix grad(m.rows(), m.cols());
  for (const Sample& s : samples) {
    check_sample(s, m);
    accumulate_data_gradient(s, m, act, 1.0, grad);
  }
  grad -= terms.lambda;
  grad += terms.t * (m - terms.a_hat - terms.b_hat);
  return grad;
}

MSolver::MSolver(const std::vector<Sample>& samples, Activation act, double t, SgdConfig cfg)
    : samples_(samples), act_(act), t_(t), cfg_(cfg) {
  cfg_.validate();
  if (!(t > 0.0)) throw ConfigError("penalty t must be positive");
  if (act_ == Activation::identity && !samples_.empty()) {
    const std::size_t m = samples_.front().x.rows();
    const std::size_t n = samples_.front().y.rows();
    Matrix gram(m, m);
    y_xt_ = Matrix(n, m);
    for (const Sample& s : samples_) {
      if (s.x.rows() != m || s.y.rows() != n || s.x.cols() != s.y.cols())
        throw ShapeError("samples disagree on layer shape");
      gram += matmul_bt(s.x, s.x);
      y_xt_ += matmul_bt(s.y, s.x);
    }
    gram *= 2.0;
    for (std::size_t i = 0; i < m; ++i) gram(i, i) += t_;
    chol_ = cholesky(gram);
    y_xt_ *= 2.0;
  }
}

MSolveResult MSolver::solve(const MTerms& terms, const Matrix& warm_start,
                            std::uint64_t seed) const {
  check_terms(warm_start, terms);
  if (terms.t != t_) throw ConfigError("MSolver built for a different penalty t");
  if (samples_.empty() || act_ == Activation::identity) return solve_closed_form(terms, warm_start);
  return solve_sgd(terms, warm_start, seed);
}

MSolveResult MSolver::solve_closed_form(const MTerms& terms, const Matrix& warm_start) const {
  MSolveResult out;
  out.closed_form = true;
  out.warm_start_objective = m_objective(samples_, warm_start, terms, act_);
  // Stationarity: M (2 sum X X^T + t I) = 2 sum Y X^T + Lambda + t (A + B).
  Matrix rhs = terms.a_hat + terms.b_hat;
  rhs *= t_;
  rhs += terms.lambda;
  if (samples_.empty()) {
    rhs *= 1.0 / t_;
    out.m = std::move(rhs);
  } else {
    rhs += y_xt_;
    for (std::size_t r = 0; r < rhs.rows(); ++r) cholesky_solve(chol_, rhs.row(r));
    out.m = std::move(rhs);
  }
  out.objective = m_objective(samples_, out.m, terms, act_);
  return out;
}

MSolveResult MSolver::solve_sgd(const MTerms& terms, const Matrix& warm_start,
                                std::uint64_t seed) const {
  const std::size_t n_samples = samples_.size();
  const std::size_t batch = std::min(n_samples, cfg_.batch_size);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n_samples);
  std::iota(order.begin(), order.end(), std::size_t{0});

  MSolveResult out;
  Matrix m = warm_start;
  Matrix velocity(m.rows(), m.cols());
  const double initial = m_objective(samples_, m, terms, act_);
  out.warm_start_objective = initial;
  out.objective = initial;
  out.m = m;
  int blown_epochs = 0;

  for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
    // Fisher-Yates with explicit draws so the order does not depend on the
    // standard library's distribution implementation.
    for (std::size_t i = n_samples; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

    for (std::size_t start = 0; start < n_samples; start += batch) {
      const std::size_t stop = std::min(n_samples, start + batch);
      const double weight =
          static_cast<double>(n_samples) / static_cast<double>(stop - start);
      Matrix grad(m.rows(), m.cols());
      for (std::size_t i = start; i < stop; ++i)
        accumulate_data_gradient(samples_[order[i]], m, act_, weight, grad);
      grad -= terms.lambda;
      grad += t_ * (m - terms.a_hat - terms.b_hat);

      velocity *= cfg_.momentum;
      grad *= cfg_.learning_rate;
      velocity += grad;
      m -= velocity;
    }

    const double obj = m_objective(samples_, m, terms, act_);
    out.trace.push_back(obj);
    if (!std::isfinite(obj)) {
      throw DivergenceError("M-subproblem SGD produced a non-finite objective at epoch " +
                                std::to_string(epoch),
                            out.trace);
    }
    if (initial > 0.0 && obj > 10.0 * initial) {
      if (++blown_epochs >= 3) {
        std::ostringstream msg;
        msg << "M-subproblem SGD diverged: objective " << obj << " exceeds 10x the initial "
            << initial << " for 3 consecutive epochs";
        throw DivergenceError(msg.str(), out.trace);
      }
    } else {
      blown_epochs = 0;
    }
    if (obj < out.objective) {
      out.objective = obj;
      out.m = m;
    }
  }
  return out;
}

Matrix solve_m(const std::vector<Sample>& samples, const Matrix& a_hat, const Matrix& b_hat,
               const Matrix& lambda, double t, const Matrix& warm_start, const SgdConfig& cfg,
               Activation act) {
  const MSolver solver(samples, act, t, cfg);
  return solver.solve(MTerms{a_hat, b_hat, lambda, t}, warm_start, cfg.seed).m;
}

}  // namespace slr
