#pragma once

#include <filesystem>
#include <string_view>
#include <vector>

#include "slr/errors.hpp"
#include "slr/matrix.hpp"
#include "slr/prox.hpp"
#include "slr/solver.hpp"
#include "slr/tensor.hpp"

namespace slr {

enum class Mode { both, sparse_only, lowrank_only };

std::string_view to_string(Mode m);
/// Accepts "both", "sparse_only"/"sparse-only", "lowrank_only"/"lowrank-only".
Mode parse_mode(std::string_view name);

struct HyperParams {
  double lambda1 = 0.1;
  double lambda2 = 0.275;
  /// Augmented-Lagrangian penalty, held fixed for the whole run.
  double t = 1e-3;
  double tau = 0.5;
  double alpha = 0.75;
  double tol = 1e-4;
  std::size_t max_iter = 500;
  SgdConfig sgd;
  Mode mode = Mode::both;

  void validate() const;
};

/// A lowered layer W (n x m) with recorded samples. For activation=identity
/// the data term is the linear reconstruction error.
struct LayerProblem {
  Matrix w;
  std::vector<Sample> samples;
  Activation activation = Activation::relu;

  void validate() const;
};

struct ObjectiveTerms {
  double total = 0.0;
  double data_term = 0.0;
  double l21_term = 0.0;
  double nuclear_term = 0.0;
};

/// sum_i ||Y_i - r((A+B) X_i)||^2 + lambda1 ||A||_{2,1} + lambda2 ||B||_*.
ObjectiveTerms objective(const LayerProblem& problem, const Matrix& a, const Matrix& b,
                         const HyperParams& hp);

struct IterationRecord {
  ObjectiveTerms objective;
  /// ||A + B - M||_F of the iteration's prediction step.
  double residual = 0.0;
  /// residual / max(1, ||M||_F).
  double relative_residual = 0.0;
};

struct AdmmState {
  Matrix a, b, m, lambda;
  std::size_t iter = 0;
  std::vector<IterationRecord> history;
};

/// The (B, M, Lambda) triple the correction step acts on.
struct CorrectionBlocks {
  Matrix b, m, lambda;
};

/// (B, M, L)_{k+1} = (B, M, L)_k - alpha * T * ((B, M, L)_k - hat), with
/// T = [[I, (tau-1) I, 0], [tau I, I, 0], [0, 0, I]].
CorrectionBlocks correction_step(const CorrectionBlocks& hat, const CorrectionBlocks& prev,
                                 double tau, double alpha);

/// Non-finite iterate inside decompose; holds the state at the failing iteration.
class BlowupError : public NumericalError {
 public:
  BlowupError(const std::string& what, std::size_t iteration, AdmmState state)
      : NumericalError(what), iteration_(iteration), state_(std::move(state)) {}
  std::size_t iteration() const { return iteration_; }
  const AdmmState& state() const { return state_; }

 private:
  std::size_t iteration_;
  AdmmState state_;
};

struct Decomposition {
  Matrix a;
  Matrix b;
  /// Nonzero components of b as returned by the final SVT step.
  SvdResult b_factors;
  AdmmState state;
  bool converged = false;
};

/// Split W into a column-sparse A plus a low-rank B by the 3-block ADMM with
/// correction step.
///
/// Starts from A = 0, B = W, M = W, Lambda = 0. Each iteration computes the
/// prediction (A-hat by group soft threshold, B-hat by SVT, M-hat by the
/// M-subproblem solver, Lambda-hat by the dual ascent step) and then corrects
/// (B, M, Lambda). Stops once the relative primal residual and the relative
/// objective change over the last 5 iterations are both <= tol, or after
/// max_iter. The returned a, b and state hold the final prediction iterates,
/// so the last history residual is exactly ||a + b - state.m||_F.
///
/// Throws BlowupError on a non-finite iterate; DivergenceError from the
/// inner solver is propagated.
Decomposition decompose(const LayerProblem& problem, const HyperParams& hp);

/// Write a, b, m, lambda of `state` as NPY files under `dir`.
void write_state_dump(const AdmmState& state, const std::filesystem::path& dir);

}  // namespace slr
