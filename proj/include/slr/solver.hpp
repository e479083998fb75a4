#pragma once

#include <cstdint>
#include <vector>

#include "slr/errors.hpp"
#include "slr/matrix.hpp"
#include "slr/tensor.hpp"

namespace slr {

/// One recorded (input, response) pair of a layer: x is m x p, y is n x p.
struct Sample {
  Matrix x;
  Matrix y;
};

struct SgdConfig {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  /// Passes over the samples per call.
  std::size_t epochs = 5;
  /// Upper bound; the effective batch is min(N, batch_size).
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  /// Throws ConfigError on out-of-range fields.
  void validate() const;
};

/// Carries the objective trace of the run that diverged.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, std::vector<double> trace)
      : NumericalError(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

/// The fixed quantities of the M-subproblem
///   sum_i ||Y_i - r(M X_i)||^2 + <Lambda, A + B - M> + t/2 ||A + B - M||^2.
struct MTerms {
  const Matrix& a_hat;
  const Matrix& b_hat;
  const Matrix& lambda;
  double t;
};

double data_term(const std::vector<Sample>& samples, const Matrix& m, Activation act);
double m_objective(const std::vector<Sample>& samples, const Matrix& m, const MTerms& terms,
                   Activation act);

/// Subgradient of the M-subproblem objective; the ReLU derivative at 0 is 0.
Matrix subgradient_m(const std::vector<Sample>& samples, const Matrix& m, const MTerms& terms,
                     Activation act = Activation::relu);

struct MSolveResult {
  Matrix m;
  double objective = 0.0;
  double warm_start_objective = 0.0;
  /// Objective after each epoch (empty for closed-form solves).
  std::vector<double> trace;
  bool closed_form = false;
};

/// Inexact minimizer of the M-subproblem.
///
/// ReLU: mini-batch SGD with momentum, returning the best end-of-epoch
/// iterate (never worse than the warm start). Identity activation and the
/// sample-free case are quadratic and solved exactly. The solver caches the
/// sample Gram matrix, so reuse one instance across ADMM iterations.
class MSolver {
 public:
  MSolver(const std::vector<Sample>& samples, Activation act, double t, SgdConfig cfg);

  MSolveResult solve(const MTerms& terms, const Matrix& warm_start, std::uint64_t seed) const;

 private:
  MSolveResult solve_closed_form(const MTerms& terms, const Matrix& warm_start) const;
  MSolveResult solve_sgd(const MTerms& terms, const Matrix& warm_start, std::uint64_t seed) const;

  const std::vector<Sample>& samples_;
  Activation act_;
  double t_;
  SgdConfig cfg_;
  // Cholesky factor of 2 sum X X^T + t I (identity activation only).
  Matrix chol_;
  Matrix y_xt_;
};

/// Single-shot form of MSolver::solve using cfg.seed.
Matrix solve_m(const std::vector<Sample>& samples, const Matrix& a_hat, const Matrix& b_hat,
               const Matrix& lambda, double t, const Matrix& warm_start, const SgdConfig& cfg,
               Activation act = Activation::relu);

}  // namespace slr
