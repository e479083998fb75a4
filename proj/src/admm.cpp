#include "slr/admm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "slr/npy.hpp"

namespace slr {

std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::both:
      return "both";
    case Mode::sparse_only:
      return "sparse_only";
    case Mode::lowrank_only:
      return "lowrank_only";
  }
  return "both";
}

Mode parse_mode(std::string_view name) {
  if (name == "both") return Mode::both;
  if (name == "sparse_only" || name == "sparse-only") return Mode::sparse_only;
  if (name == "lowrank_only" || name == "lowrank-only") return Mode::lowrank_only;
  throw ConfigError("unknown mode '" + std::string(name) + "'");
}

void HyperParams::validate() const {
  if (!(lambda1 > 0.0)) throw ConfigError("lambda1 must be positive");
  if (!(lambda2 > 0.0)) throw ConfigError("lambda2 must be positive");
  if (!(t > 0.0)) throw ConfigError("t must be positive");
  if (!(tol > 0.0)) throw ConfigError("tol must be positive");
  if (max_iter < 1) throw ConfigError("max_iter must be >= 1");
  if (!std::isfinite(tau) || !std::isfinite(alpha)) throw ConfigError("tau/alpha must be finite");
  sgd.validate();
}

void LayerProblem::validate() const {
  if (w.rows() == 0 || w.cols() == 0) throw ShapeError("layer weight matrix is empty");
  if (!all_finite(w)) throw NumericalError("layer weight matrix has non-finite entries");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    if (s.x.rows() != w.cols() || s.y.rows() != w.rows() || s.x.cols() != s.y.cols()) {
      std::ostringstream msg;
      msg << "sample " << i << ": x " << s.x.rows() << "x" << s.x.cols() << ", y " << s.y.rows()
          << "x" << s.y.cols() << " inconsistent with W " << w.rows() << "x" << w.cols();
      throw ShapeError(msg.str());
    }
    if (!all_finite(s.x) || !all_finite(s.y))
      throw NumericalError("sample " + std::to_string(i) + " has non-finite entries");
  }
}

ObjectiveTerms objective(const LayerProblem& problem, const Matrix& a, const Matrix& b,
                         const HyperParams& hp) {
  require_same_shape(a, problem.w, "objective (A)");
  require_same_shape(b, problem.w, "objective (B)");
  ObjectiveTerms o;
  o.data_term = data_term(problem.samples, a + b, problem.activation);
  const std::vector<double> norms = column_norms(a);
  o.l21_term = hp.lambda1 * std::accumulate(norms.begin(), norms.end(), 0.0);
  o.nuclear_term = hp.lambda2 * nuclear_norm(b);
  o.total = o.data_term + o.l21_term + o.nuclear_term;
  return o;
}

CorrectionBlocks correction_step(const CorrectionBlocks& hat, const CorrectionBlocks& prev,
                                 double tau, double alpha) {
  require_same_shape(hat.b, prev.b, "correction (B)");
  require_same_shape(hat.m, prev.m, "correction (M)");
  require_same_shape(hat.lambda, prev.lambda, "correction (Lambda)");
  require_same_shape(prev.b, prev.m, "correction (B vs M)");
  CorrectionBlocks next{prev.b, prev.m, prev.lambda};
  for (std::size_t i = 0; i < prev.b.size(); ++i) {
    const double db = prev.b.data()[i] - hat.b.data()[i];
    const double dm = prev.m.data()[i] - hat.m.data()[i];
    next.b.data()[i] -= alpha * (db + (tau - 1.0) * dm);
    next.m.data()[i] -= alpha * (tau * db + dm);
  }
  for (std::size_t i = 0; i < prev.lambda.size(); ++i)
    next.lambda.data()[i] -= alpha * (prev.lambda.data()[i] - hat.lambda.data()[i]);
  return next;
}

namespace {

std::uint64_t iteration_seed(std::uint64_t base, std::size_t iter) {
  // splitmix64 finalizer
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (iter + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void guard_finite(const AdmmState& state, std::size_t iter) {
  const char* which = nullptr;
  if (!all_finite(state.a)) which = "A";
  else if (!all_finite(state.b)) which = "B";
  else if (!all_finite(state.m)) which = "M";
  else if (!all_finite(state.lambda)) which = "Lambda";
  if (which == nullptr) return;
  throw BlowupError(std::string("non-finite ") + which + " at ADMM iteration " +
                        std::to_string(iter),
                    iter, state);
}

}  // namespace

Decomposition decompose(const LayerProblem& problem, const HyperParams& hp) {
  problem.validate();
  hp.validate();
  const std::size_t n = problem.w.rows();
  const std::size_t m = problem.w.cols();
  const MSolver m_solver(problem.samples, problem.activation, hp.t, hp.sgd);

  // Corrected iterates carried between iterations.
  Matrix a(n, m);
  Matrix b = hp.mode == Mode::sparse_only ? Matrix(n, m) : problem.w;
  Matrix mm = problem.w;
  Matrix lambda(n, m);

  Decomposition out;
  AdmmState& st = out.state;
  SvdResult b_factors;
  b_factors.u = Matrix(n, 0);
  b_factors.v = Matrix(0, m);

  for (std::size_t k = 0; k < hp.max_iter; ++k) {
    Matrix scaled_dual = lambda;
    scaled_dual *= 1.0 / hp.t;

    Matrix a_hat(n, m);
    if (hp.mode != Mode::lowrank_only) a_hat = prox_l21(mm - b - scaled_dual, hp.lambda1 / hp.t);

    Matrix b_hat(n, m);
    double nuclear = 0.0;
    if (hp.mode != Mode::sparse_only) {
      SvtResult s = svt(mm - a_hat - scaled_dual, hp.lambda2 / hp.t);
      b_hat = std::move(s.b);
      b_factors = std::move(s.factors);
      nuclear = std::accumulate(b_factors.singular_values.begin(),
                                b_factors.singular_values.end(), 0.0);
    }

    MSolveResult ms =
        m_solver.solve(MTerms{a_hat, b_hat, lambda, hp.t}, mm, iteration_seed(hp.sgd.seed, k));
    Matrix m_hat = std::move(ms.m);

    const Matrix gap = a_hat + b_hat - m_hat;
    Matrix lambda_hat = lambda + hp.t * gap;

    st.a = a_hat;
    st.b = b_hat;
    st.m = m_hat;
    st.lambda = lambda_hat;
    st.iter = k + 1;
    guard_finite(st, k);

    IterationRecord rec;
    rec.objective.data_term = data_term(problem.samples, a_hat + b_hat, problem.activation);
    const std::vector<double> norms = column_norms(a_hat);
    rec.objective.l21_term = hp.lambda1 * std::accumulate(norms.begin(), norms.end(), 0.0);
    rec.objective.nuclear_term = hp.lambda2 * nuclear;
    rec.objective.total =
        rec.objective.data_term + rec.objective.l21_term + rec.objective.nuclear_term;
    rec.residual = frobenius_norm(gap);
    rec.relative_residual = rec.residual / std::max(1.0, frobenius_norm(m_hat));
    st.history.push_back(rec);

    CorrectionBlocks next = correction_step(CorrectionBlocks{b_hat, m_hat, lambda_hat},
                                            CorrectionBlocks{b, mm, lambda}, hp.tau, hp.alpha);
    a = std::move(a_hat);
    b = hp.mode == Mode::sparse_only ? Matrix(n, m) : std::move(next.b);
    mm = std::move(next.m);
    lambda = std::move(next.lambda);

    if (rec.relative_residual <= hp.tol && st.history.size() > 5) {
      const double now = rec.objective.total;
      const double before = st.history[st.history.size() - 6].objective.total;
      if (std::abs(now - before) / std::max(1.0, std::abs(now)) <= hp.tol) {
        out.converged = true;
        break;
      }
    }
  }

  out.a = st.a;
  out.b = st.b;
  out.b_factors = std::move(b_factors);
  return out;
}

void write_state_dump(const AdmmState& state, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dump directory " + dir.string() + ": " + ec.message());
  npy::write(dir / "a.npy", state.a);
  npy::write(dir / "b.npy", state.b);
  npy::write(dir / "m.npy", state.m);
  npy::write(dir / "lambda.npy", state.lambda);
}

}  // namespace slr
