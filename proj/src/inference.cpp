#include "slr/inference.hpp"

#include <algorithm>
#include <chrono>

#include "slr/errors.hpp"

namespace slr {

Matrix forward_dense(const Matrix& w, const Matrix& x, Activation act, unsigned threads) {
  if (w.cols() != x.rows())
    throw ShapeError("forward_dense: W is " + std::to_string(w.rows()) + "x" +
                     std::to_string(w.cols()) + " but X has " + std::to_string(x.rows()) +
                     " rows");
  return activate(matmul(w, x, threads), act);
}

Matrix forward_compressed(const CompressedLayer& layer, const Matrix& x, Activation act,
                          KernelStats* stats, unsigned threads) {
  if (layer.cols != x.rows())
    throw ShapeError("forward_compressed: layer has " + std::to_string(layer.cols) +
                     " inputs but X has " + std::to_string(x.rows()) + " rows");
  const std::size_t p = x.cols();
  const std::size_t nz = layer.sparse.nnz_cols();
  KernelStats local;

  Matrix z(layer.rows, p);
  if (nz > 0) {
    Matrix gathered(nz, p);
    for (std::size_t k = 0; k < nz; ++k) {
      auto src = x.row(layer.sparse.nz_col_indices[k]);
      std::copy(src.begin(), src.end(), gathered.row(k).begin());
    }
    z = matmul(layer.sparse.packed, gathered, threads);
    local.sparse_madds = static_cast<std::uint64_t>(layer.rows) * nz * p;
  }
  if (layer.dense_lowrank) {
    z += matmul(*layer.dense_lowrank, x, threads);
    local.lowrank_madds = static_cast<std::uint64_t>(layer.rows) * layer.cols * p;
  } else if (layer.lowrank && layer.lowrank->rank() > 0) {
    const std::size_t r = layer.lowrank->rank();
    z += matmul(layer.lowrank->u, matmul(layer.lowrank->v, x, threads), threads);
    local.lowrank_madds = static_cast<std::uint64_t>(r) * (layer.cols + layer.rows) * p;
  }
  if (stats) *stats = local;
  return activate(std::move(z), act);
}

nlohmann::json BenchReport::to_json() const {
  return {{"layer", layer},
          {"rows", rows},
          {"cols", cols},
          {"x_cols", x_cols},
          {"rank", rank},
          {"nz_cols", nz_cols},
          {"cr_total", cr_total},
          {"repetitions", repetitions},
          {"threads", threads},
          {"dense_seconds", dense_seconds},
          {"decomposed_seconds", decomposed_seconds},
          {"speedup", speedup},
          {"max_divergence", max_divergence}};
}

namespace {

template <class F>
double median_seconds(F&& run, std::size_t warmup, std::size_t reps) {
  for (std::size_t i = 0; i < warmup; ++i) run();
  std::vector<double> times;
  times.reserve(reps);
  for (std::size_t i = 0; i < reps; ++i) {
    const auto start = std::chrono::steady_clock::now();
    run();
    const auto stop = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double>(stop - start).count());
  }
  std::sort(times.begin(), times.end());
  const std::size_t mid = times.size() / 2;
  return times.size() % 2 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
}

}  // namespace

BenchReport benchmark(const CompressedLayer& layer, const Matrix& w, const Matrix& x,
                      const BenchOptions& opts) {
  if (opts.repetitions < 5) throw ConfigError("benchmark needs at least 5 repetitions");
  if (w.rows() != layer.rows || w.cols() != layer.cols)
    throw ShapeError("benchmark: dense weights do not match the layer shape");

  BenchReport rep;
  rep.layer = layer.metadata.name;
  rep.rows = layer.rows;
  rep.cols = layer.cols;
  rep.x_cols = x.cols();
  rep.rank = layer.rank();
  rep.nz_cols = layer.sparse.nnz_cols();
  rep.cr_total = compression_rate(layer).cr_total;
  rep.repetitions = opts.repetitions;
  rep.threads = opts.threads;

  const Matrix reference = forward_dense(layer.densify(), x, opts.activation, opts.threads);
  const Matrix decomposed = forward_compressed(layer, x, opts.activation, nullptr, opts.threads);
  rep.max_divergence = max_relative_error(decomposed, reference);
  if (!(rep.max_divergence <= opts.divergence_bound))
    throw CorrectnessError("decomposed output diverges from dense by " +
                           std::to_string(rep.max_divergence) + " (relative)");

  Matrix sink;
  rep.dense_seconds = median_seconds(
      [&] { sink = forward_dense(w, x, opts.activation, opts.threads); }, opts.warmup,
      opts.repetitions);
  rep.decomposed_seconds = median_seconds(
      [&] { sink = forward_compressed(layer, x, opts.activation, nullptr, opts.threads); },
      opts.warmup, opts.repetitions);
  rep.speedup = rep.decomposed_seconds > 0.0 ? rep.dense_seconds / rep.decomposed_seconds : 0.0;
  return rep;
}

BenchReport benchmark(const CompressedLayer& layer, const Matrix& x, const BenchOptions& opts) {
  return benchmark(layer, layer.densify(), x, opts);
}

}  // namespace slr
