#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "slr/matrix.hpp"
#include "slr/prox.hpp"

namespace slr {

/// Column-structured sparse matrix: only the nonzero columns are kept, packed
/// side by side in index order.
struct ColumnSparse {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint32_t> nz_col_indices;
  Matrix packed;  // rows x nz_col_indices.size()

  std::size_t nnz_cols() const { return nz_col_indices.size(); }
  Matrix densify() const;
  /// Throws FormatError if the indices are out of range, unsorted or do not
  /// match the packed block.
  void validate() const;
  bool operator==(const ColumnSparse&) const = default;
};

/// Drop columns with Euclidean norm <= zero_tol.
ColumnSparse pack_sparse(const Matrix& a, double zero_tol = 0.0);

/// b ~= u * v with u n x r and v r x m.
struct LowRankFactors {
  Matrix u;
  Matrix v;

  std::size_t rank() const { return u.cols(); }
  Matrix product() const;
  bool operator==(const LowRankFactors&) const = default;
};

/// Keep singular components with sigma_i > sv_tol * sigma_1 and fold the
/// singular values into u.
LowRankFactors factorize_lowrank(const Matrix& b, double sv_tol = 1e-10);

/// Same, reusing factors already computed by an SVT step.
LowRankFactors factorize_lowrank(const SvdResult& factors, std::size_t rows, std::size_t cols);

struct ParamCounts {
  std::uint64_t original = 0;
  std::uint64_t sparse = 0;
  std::uint64_t lowrank = 0;
  bool operator==(const ParamCounts&) const = default;
};

struct LayerMetadata {
  std::string name;
  nlohmann::json hyperparams = nlohmann::json::object();
  double residual = 0.0;
  std::uint64_t iterations = 0;
  bool converged = false;
  /// Free-form provenance: tool version, seed, strategy, source files.
  nlohmann::json provenance = nlohmann::json::object();
  bool operator==(const LayerMetadata&) const = default;
};

/// A layer stored as column-sparse A plus low-rank B. B is kept factored
/// unless r (n + m) >= n m, in which case it is stored (and counted) dense.
struct CompressedLayer {
  std::size_t rows = 0;
  std::size_t cols = 0;
  ColumnSparse sparse;
  std::optional<LowRankFactors> lowrank;
  std::optional<Matrix> dense_lowrank;
  ParamCounts counts;
  LayerMetadata metadata;

  Matrix densify() const;
  /// Dense B (zero matrix when absent).
  Matrix lowrank_dense() const;
  std::size_t rank() const { return lowrank ? lowrank->rank() : 0; }
  bool operator==(const CompressedLayer&) const = default;
};

/// Original n m; sparse rows |nz| + |nz| (one index per kept column);
/// low-rank r (n + m), or n m when stored dense.
ParamCounts count_params(const CompressedLayer& layer);

/// Assemble a layer, applying the dense fallback rule and filling the counts.
CompressedLayer make_compressed_layer(ColumnSparse sparse, std::optional<LowRankFactors> lowrank,
                                      LayerMetadata metadata);

/// An untouched layer: W kept dense as the B part, counted at 100%.
CompressedLayer make_passthrough_layer(const Matrix& w, LayerMetadata metadata);

struct CompressionRate {
  double cr_a = 0.0;      // percent
  double cr_b = 0.0;      // percent
  double cr_total = 0.0;  // percent
  /// 100 / cr_total.
  double reduction() const { return 100.0 / cr_total; }
};

CompressionRate compression_rate(const ParamCounts& counts);
CompressionRate compression_rate(const CompressedLayer& layer);

/// "22.5% (4.44× reduction of model size)"
std::string describe_reduction(double cr_total_percent);

/// Binary container: "SLRL", u16 version, shape, nz indices (u32), packed data
/// (f64), low-rank part, UTF-8 JSON metadata, trailing CRC32. Little-endian.
inline constexpr std::uint16_t kContainerVersion = 1;

std::vector<std::uint8_t> serialize(const CompressedLayer& layer);
CompressedLayer deserialize(const std::vector<std::uint8_t>& bytes);
void save(const CompressedLayer& layer, const std::filesystem::path& path);
CompressedLayer load(const std::filesystem::path& path);

struct Csr {
  std::vector<std::int64_t> indptr;
  std::vector<std::int64_t> indices;
  std::vector<double> data;
};

/// Standard CSR of the dense sparse component (exact zeros dropped).
Csr to_csr(const ColumnSparse& a);

/// Writes indptr.npy, indices.npy and data.npy into `dir`.
void export_csr(const ColumnSparse& a, const std::filesystem::path& dir);

}  // namespace slr
