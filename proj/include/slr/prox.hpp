#pragma once

#include <vector>

#include "slr/errors.hpp"
#include "slr/matrix.hpp"

namespace slr {

/// a = u * diag(singular_values) * v, with u n x r, v r x m, r = min(n, m).
/// Singular values are nonincreasing and nonnegative. Singular vectors are not
/// sign-canonicalized; columns of u paired with a zero singular value are zero.
struct SvdResult {
  Matrix u;
  std::vector<double> singular_values;
  Matrix v;

  std::size_t rank() const { return singular_values.size(); }
  Matrix reconstruct() const;
};

/// Raised when the Jacobi sweeps do not converge; keeps the partially
/// orthogonalized iterate for post-mortem.
class SvdConvergenceError : public NumericalError {
 public:
  SvdConvergenceError(const std::string& what, Matrix iterate)
      : NumericalError(what), iterate_(std::move(iterate)) {}
  const Matrix& iterate() const { return iterate_; }

 private:
  Matrix iterate_;
};

/// One-sided Jacobi SVD. Deterministic for a given input; inputs with many
/// more columns than rows (or vice versa) are first reduced by a QR step.
SvdResult svd(const Matrix& a, int max_sweeps = 60);

/// Column-wise group soft threshold: the minimizer of
/// threshold * ||X||_{2,1} + 1/2 ||X - c||_F^2. Columns whose norm does not
/// exceed the threshold become exactly zero.
Matrix prox_l21(const Matrix& c, double threshold);

struct SvtResult {
  Matrix b;
  /// Only the components whose shrunk singular value is positive.
  SvdResult factors;
};

/// Singular value soft threshold: the minimizer of
/// threshold * ||X||_* + 1/2 ||X - d||_F^2.
SvtResult svt(const Matrix& d, double threshold);

/// Sum of singular values.
double nuclear_norm(const Matrix& a);

}  // namespace slr
