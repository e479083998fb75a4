#include "doctest.h"

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "slr/errors.hpp"
#include "slr/inference.hpp"

using slr::Matrix;

namespace {

slr::CompressedLayer layer_from(const Matrix& a, const Matrix& b) {
  return slr::make_compressed_layer(slr::pack_sparse(a), slr::factorize_lowrank(b), {});
}

slr::CompressedLayer random_layer(std::mt19937_64& rng, std::size_t n, std::size_t m,
                                  std::size_t r, double keep) {
  Matrix a = oracle::random(rng, n, m);
  for (std::size_t j = 0; j < m; ++j)
    if (oracle::uniform(rng, 0, 1) > keep)
      for (std::size_t i = 0; i < n; ++i) a(i, j) = 0.0;
  return layer_from(a, slr::matmul(oracle::random(rng, n, r), oracle::random(rng, r, m)));
}

}  // namespace

TEST_CASE("forward_dense hand examples") {
  std::mt19937_64 rng(61);
  const Matrix x = slr::relu(oracle::random(rng, 5, 7));
  CHECK(slr::forward_dense(Matrix::identity(5), x, slr::Activation::relu) == x);
  CHECK(slr::forward_dense(Matrix(3, 5), x, slr::Activation::relu) == Matrix(3, 7));
  CHECK_THROWS_AS(slr::forward_dense(Matrix(3, 4), x, slr::Activation::relu), slr::ShapeError);
}

TEST_CASE("forward_dense matches a triple loop") {
  std::mt19937_64 rng(62);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix w = oracle::random(rng, 9, 13), x = oracle::random(rng, 13, 11);
    const Matrix want = slr::relu(oracle::naive_matmul(w, x));
    CHECK(oracle::rel_diff(slr::forward_dense(w, x, slr::Activation::relu), want) <= 1e-10);
    CHECK(oracle::rel_diff(slr::forward_dense(w, x, slr::Activation::relu, 3), want) <= 1e-10);
    CHECK(oracle::rel_diff(slr::forward_dense(w, x, slr::Activation::identity),
                           oracle::naive_matmul(w, x)) <= 1e-10);
  }
}

TEST_CASE("empty compressed layer outputs zero") {
  const auto layer = layer_from(Matrix(4, 6), Matrix(4, 6));
  CHECK(layer.rank() == 0);
  std::mt19937_64 rng(63);
  slr::KernelStats stats;
  const Matrix out = slr::forward_compressed(layer, oracle::random(rng, 6, 5),
                                             slr::Activation::identity, &stats);
  CHECK(out == Matrix(4, 5));
  CHECK(stats.sparse_madds == 0);
  CHECK(stats.lowrank_madds == 0);
}

TEST_CASE("single sparse column") {
  Matrix a(3, 4);
  a(0, 2) = 1.0;
  a(1, 2) = -2.0;
  a(2, 2) = 0.5;
  const Matrix x{{1, 1}, {2, 2}, {3, -4}, {5, 5}};
  const Matrix out = slr::forward_compressed(layer_from(a, Matrix(3, 4)), x,
                                             slr::Activation::identity);
  CHECK(out == Matrix{{3, -4}, {-6, 8}, {1.5, -2}});
  CHECK(slr::forward_compressed(layer_from(a, Matrix(3, 4)), x, slr::Activation::relu) ==
        Matrix{{3, 0}, {0, 8}, {1.5, 0}});
}

TEST_CASE("compressed forward equals dense forward of the densified layer") {
  std::mt19937_64 rng(64);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + rng() % 30, m = 2 + rng() % 30, p = 1 + rng() % 20;
    const std::size_t r = 1 + rng() % std::min<std::size_t>(5, std::min(n, m));
    const auto layer = random_layer(rng, n, m, r, oracle::uniform(rng, 0, 1));
    const Matrix x = oracle::random(rng, m, p);
    for (auto act : {slr::Activation::relu, slr::Activation::identity}) {
      const Matrix got = slr::forward_compressed(layer, x, act);
      const Matrix want = slr::forward_dense(layer.densify(), x, act);
      CHECK(oracle::rel_diff(got, want) <= 1e-9);
    }
    CHECK(slr::forward_compressed(layer, x, slr::Activation::relu, nullptr, 4) ==
          slr::forward_compressed(layer, x, slr::Activation::relu));
  }
}

TEST_CASE("multiply-add counts") {
  std::mt19937_64 rng(65);
  const auto layer = random_layer(rng, 20, 30, 3, 0.25);
  const std::size_t p = 7;
  slr::KernelStats stats;
  slr::forward_compressed(layer, oracle::random(rng, 30, p), slr::Activation::relu, &stats);
  CHECK(stats.sparse_madds == 20 * layer.sparse.nnz_cols() * p);
  CHECK(stats.lowrank_madds == 3 * (30 + 20) * p);

  const auto dense = slr::make_compressed_layer(slr::pack_sparse(Matrix(4, 4)),
                                                slr::factorize_lowrank(oracle::random(rng, 4, 4)),
                                                {});
  slr::forward_compressed(dense, oracle::random(rng, 4, p), slr::Activation::relu, &stats);
  CHECK(stats.lowrank_madds == 4 * 4 * p);
  CHECK_THROWS_AS(slr::forward_compressed(dense, Matrix(5, 2), slr::Activation::relu),
                  slr::ShapeError);
}

TEST_CASE("benchmark report") {
  std::mt19937_64 rng(66);
  const auto layer = random_layer(rng, 32, 48, 4, 0.2);
  const Matrix x = oracle::random(rng, 48, 64);
  slr::BenchOptions opts;
  const auto rep = slr::benchmark(layer, x, opts);
  CHECK(rep.rows == 32);
  CHECK(rep.cols == 48);
  CHECK(rep.x_cols == 64);
  CHECK(rep.rank == 4);
  CHECK(rep.nz_cols == layer.sparse.nnz_cols());
  CHECK(rep.repetitions == 5);
  CHECK(rep.dense_seconds > 0);
  CHECK(rep.decomposed_seconds > 0);
  CHECK(rep.speedup == rep.dense_seconds / rep.decomposed_seconds);
  CHECK(rep.max_divergence <= 1e-6);
  CHECK(rep.cr_total == doctest::Approx(slr::compression_rate(layer).cr_total));
  const auto j = rep.to_json();
  CHECK(j.at("speedup").get<double>() == rep.speedup);
  CHECK(j.contains("max_divergence"));

  opts.repetitions = 4;
  CHECK_THROWS_AS(slr::benchmark(layer, x, opts), slr::ConfigError);
}

TEST_CASE("benchmark against the original weights on a dense fallback layer") {
  std::mt19937_64 rng(67);
  const Matrix w = oracle::random(rng, 10, 10);
  const auto pass = slr::make_passthrough_layer(w, {});
  const auto rep = slr::benchmark(pass, w, oracle::random(rng, 10, 40), {});
  CHECK(rep.cr_total == doctest::Approx(100.0));
  CHECK(rep.max_divergence == 0.0);
  CHECK(rep.speedup > 0);
}

TEST_CASE("correctness gate withholds timing") {
  std::mt19937_64 rng(68);
  const auto layer = random_layer(rng, 8, 8, 2, 0.5);
  Matrix x = oracle::random(rng, 8, 4);
  x(2, 1) = NAN;
  CHECK_THROWS_AS(slr::benchmark(layer, x, {}), slr::CorrectnessError);
  slr::BenchOptions strict;
  strict.divergence_bound = -1.0;
  CHECK_THROWS_AS(slr::benchmark(layer, oracle::random(rng, 8, 4), strict),
                  slr::CorrectnessError);
}
