#include "slr/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "slr/errors.hpp"

namespace slr::synth {

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix out(rows, cols);
  for (double& v : out.data()) v = scale * nd(rng);
  return out;
}

Matrix orthonormal_columns(Rng& rng, std::size_t rows, std::size_t cols) {
  if (cols > rows) throw ShapeError("orthonormal_columns: more columns than rows");
  Matrix q = gaussian(rng, rows, cols);
  for (std::size_t j = 0; j < cols; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < j; ++k) {
        double d = 0.0;
        for (std::size_t i = 0; i < rows; ++i) d += q(i, j) * q(i, k);
        for (std::size_t i = 0; i < rows; ++i) q(i, j) -= d * q(i, k);
      }
    }
    double nrm = 0.0;
    for (std::size_t i = 0; i < rows; ++i) nrm += q(i, j) * q(i, j);
    nrm = std::sqrt(nrm);
    for (std::size_t i = 0; i < rows; ++i) q(i, j) /= nrm;
  }
  return q;
}

PlantedLayer planted_layer(Rng& rng, const PlantedSpec& spec) {
  if (spec.sparse_cols > spec.cols) throw ConfigError("more sparse columns than columns");
  PlantedLayer out;
  std::vector<std::size_t> order(spec.cols);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  out.support.assign(order.begin(), order.begin() + spec.sparse_cols);
  std::sort(out.support.begin(), out.support.end());

  out.a = Matrix(spec.rows, spec.cols);
  const Matrix g = gaussian(rng, spec.rows, spec.sparse_cols);
  for (std::size_t k = 0; k < spec.sparse_cols; ++k) {
    double nrm = 0.0;
    for (std::size_t i = 0; i < spec.rows; ++i) nrm += g(i, k) * g(i, k);
    nrm = std::sqrt(nrm);
    for (std::size_t i = 0; i < spec.rows; ++i)
      out.a(i, out.support[k]) = spec.column_norm * g(i, k) / nrm;
  }

  const Matrix u = orthonormal_columns(rng, spec.rows, spec.rank);
  Matrix v = gaussian(rng, spec.rank, spec.cols);
  for (std::size_t c = 0; c < spec.cols; ++c) {
    double nrm = 0.0;
    for (std::size_t r = 0; r < spec.rank; ++r) nrm += v(r, c) * v(r, c);
    nrm = std::sqrt(nrm);
    for (std::size_t r = 0; r < spec.rank; ++r) v(r, c) /= nrm;
  }
  out.b = spec.lowrank_scale * matmul(u, v);

  out.w = out.a + out.b;
  if (spec.noise > 0.0) out.w += gaussian(rng, spec.rows, spec.cols, spec.noise);
  out.w *= spec.scale;
  return out;
}

std::vector<Matrix> inputs(Rng& rng, std::size_t n_samples, std::size_t m, std::size_t p,
                           bool nonnegative) {
  std::vector<Matrix> xs;
  xs.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    Matrix x = gaussian(rng, m, p);
    if (nonnegative) x = 0.5 * relu(std::move(x));
    xs.push_back(std::move(x));
  }
  return xs;
}

std::vector<Sample> record(const Matrix& w, const std::vector<Matrix>& xs, Activation act) {
  std::vector<Sample> out;
  out.reserve(xs.size());
  for (const Matrix& x : xs) out.push_back({x, activate(matmul(w, x), act)});
  return out;
}

PlantedProblem planted_problem(std::uint64_t seed) {
  Rng rng(seed);
  PlantedProblem out;
  out.truth = planted_layer(rng, PlantedSpec{});
  out.problem.w = out.truth.w;
  out.problem.activation = Activation::relu;
  out.problem.samples = record(out.truth.w, inputs(rng, 16, 32, 16, false), Activation::relu);
  return out;
}

Stack planted_stack(std::uint64_t seed, const std::vector<std::size_t>& dims, std::size_t n_train,
                    std::size_t n_heldout, std::size_t p) {
  if (dims.size() < 2) throw ConfigError("a stack needs at least one layer");
  Rng rng(seed);
  Stack s;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    PlantedSpec spec;
    spec.rows = dims[k + 1];
    spec.cols = dims[k];
    spec.sparse_cols = dims[k] / 4;
    spec.rank = 2;
    spec.noise = 0.3;
    spec.scale = 1.0 / std::sqrt(static_cast<double>(dims[k]) / 8.0);
    s.weights.push_back(planted_layer(rng, spec).w);
  }
  std::vector<Matrix> xs = inputs(rng, n_train + n_heldout, dims[0], p, true);
  s.train_inputs.assign(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.heldout_inputs.assign(xs.begin() + static_cast<std::ptrdiff_t>(n_train), xs.end());
  return s;
}

std::vector<std::vector<Matrix>> forward_stack(const std::vector<Matrix>& weights,
                                               const std::vector<Matrix>& xs) {
  std::vector<std::vector<Matrix>> out{xs};
  for (const Matrix& w : weights) {
    std::vector<Matrix> next;
    for (const Matrix& x : out.back()) next.push_back(relu(matmul(w, x)));
    out.push_back(std::move(next));
  }
  return out;
}

}  // namespace slr::synth
