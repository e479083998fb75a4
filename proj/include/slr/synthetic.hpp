#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "slr/admm.hpp"
#include "slr/matrix.hpp"

namespace slr::synth {

using Rng = std::mt19937_64;

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0);

/// Orthonormal columns (Gram-Schmidt on a Gaussian draw). Needs cols <= rows.
Matrix orthonormal_columns(Rng& rng, std::size_t rows, std::size_t cols);

struct PlantedLayer {
  Matrix a;  // column-sparse part
  Matrix b;  // low-rank part
  Matrix w;  // (a + b + noise) * scale
  std::vector<std::size_t> support;  // sorted nonzero columns of a
};

struct PlantedSpec {
  std::size_t rows = 16;
  std::size_t cols = 32;
  std::size_t sparse_cols = 8;
  std::size_t rank = 2;
  /// Every planted sparse column has this Euclidean norm.
  double column_norm = 3.0;
  /// B = lowrank_scale * U V with orthonormal U and unit-norm columns of V,
  /// so all columns of B carry the same energy.
  double lowrank_scale = 2.0;
  double noise = 0.0;
  /// Applied to the whole of W (a and b stay unscaled).
  double scale = 1.0;
};

PlantedLayer planted_layer(Rng& rng, const PlantedSpec& spec);

/// n_samples inputs of shape m x p: Gaussian, or 0.5 * relu(Gaussian) when
/// nonnegative is set.
std::vector<Matrix> inputs(Rng& rng, std::size_t n_samples, std::size_t m, std::size_t p,
                           bool nonnegative);

/// Samples (x, r(W x)).
std::vector<Sample> record(const Matrix& w, const std::vector<Matrix>& xs, Activation act);

/// The 16 x 32 planted problem: 8 columns of norm 3, rank-2 B of scale 2,
/// no noise, 16 Gaussian samples of 16 columns, ReLU responses.
struct PlantedProblem {
  PlantedLayer truth;
  LayerProblem problem;
};
PlantedProblem planted_problem(std::uint64_t seed);

/// Layer stack for the propagation experiments: dims (d0, d1, ..., dL), each
/// W_k planted with d_{k-1}/4 sparse columns, rank 2, noise 0.3, scaled by
/// 1/sqrt(d_{k-1}/8). Inputs are nonnegative.
struct Stack {
  std::vector<Matrix> weights;
  std::vector<Matrix> train_inputs;
  std::vector<Matrix> heldout_inputs;
};
Stack planted_stack(std::uint64_t seed, const std::vector<std::size_t>& dims,
                    std::size_t n_train = 16, std::size_t n_heldout = 4, std::size_t p = 16);

/// Responses of every layer: out[0] = xs, out[k] = relu(W_k out[k-1]).
std::vector<std::vector<Matrix>> forward_stack(const std::vector<Matrix>& weights,
                                               const std::vector<Matrix>& xs);

}  // namespace slr::synth
