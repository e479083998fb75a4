#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"

#include "slr/compressed.hpp"
#include "slr/matrix.hpp"
#include "slr/tensor.hpp"

namespace slr {

/// r(W X).
Matrix forward_dense(const Matrix& w, const Matrix& x, Activation act, unsigned threads = 1);

/// Multiply-add counts of one forward_compressed call.
struct KernelStats {
  std::uint64_t sparse_madds = 0;
  std::uint64_t lowrank_madds = 0;
};

/// r(A X + U (V X)). The sparse term only reads the rows of X that match a
/// kept column of A, so it costs n |nz| p multiply-adds. A dense-stored B
/// costs n m p.
Matrix forward_compressed(const CompressedLayer& layer, const Matrix& x, Activation act,
                          KernelStats* stats = nullptr, unsigned threads = 1);

struct BenchOptions {
  std::size_t repetitions = 5;
  std::size_t warmup = 1;
  unsigned threads = 1;
  Activation activation = Activation::relu;
  double divergence_bound = 1e-6;
};

struct BenchReport {
  std::string layer;
  std::size_t rows = 0, cols = 0, x_cols = 0, rank = 0, nz_cols = 0;
  double cr_total = 0.0;
  std::size_t repetitions = 0;
  unsigned threads = 1;
  double dense_seconds = 0.0;
  double decomposed_seconds = 0.0;
  double speedup = 0.0;
  double max_divergence = 0.0;

  nlohmann::json to_json() const;
};

/// Times forward_dense(densified layer) against forward_compressed on the
/// same input. The outputs are compared first; a relative divergence above
/// the bound throws CorrectnessError and no timing is taken.
BenchReport benchmark(const CompressedLayer& layer, const Matrix& x, const BenchOptions& opts);

/// Same, timing the dense path with an explicit W (the original weights).
/// The correctness gate still compares against the densified layer.
BenchReport benchmark(const CompressedLayer& layer, const Matrix& w, const Matrix& x,
                      const BenchOptions& opts);

}  // namespace slr
