#include "slr/compressed.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "slr/errors.hpp"
#include "slr/npy.hpp"

namespace slr {

Matrix ColumnSparse::densify() const {
  Matrix out(rows, cols);
  for (std::size_t k = 0; k < nz_col_indices.size(); ++k) {
    const std::size_t c = nz_col_indices[k];
    for (std::size_t r = 0; r < rows; ++r) out(r, c) = packed(r, k);
  }
  return out;
}

void ColumnSparse::validate() const {
  if (packed.rows() != rows || packed.cols() != nz_col_indices.size())
    throw FormatError("column-sparse block does not match its index list");
  for (std::size_t k = 0; k < nz_col_indices.size(); ++k) {
    if (nz_col_indices[k] >= cols) throw FormatError("column index out of range");
    if (k > 0 && nz_col_indices[k] <= nz_col_indices[k - 1])
      throw FormatError("column indices not strictly increasing");
  }
}

ColumnSparse pack_sparse(const Matrix& a, double zero_tol) {
  ColumnSparse out;
  out.rows = a.rows();
  out.cols = a.cols();
  const std::vector<double> norms = column_norms(a);
  for (std::size_t c = 0; c < a.cols(); ++c)
    if (norms[c] > zero_tol) out.nz_col_indices.push_back(static_cast<std::uint32_t>(c));
  out.packed = Matrix(a.rows(), out.nz_col_indices.size());
  for (std::size_t k = 0; k < out.nz_col_indices.size(); ++k)
    for (std::size_t r = 0; r < a.rows(); ++r) out.packed(r, k) = a(r, out.nz_col_indices[k]);
  return out;
}

Matrix LowRankFactors::product() const { return matmul(u, v); }

LowRankFactors factorize_lowrank(const SvdResult& factors, std::size_t rows, std::size_t cols) {
  const std::size_t r = factors.rank();
  LowRankFactors out{Matrix(rows, r), Matrix(r, cols)};
  if (r > 0 && (factors.u.rows() != rows || factors.v.cols() != cols))
    throw ShapeError("factor shapes do not match the layer");
  for (std::size_t j = 0; j < r; ++j) {
    for (std::size_t i = 0; i < rows; ++i) out.u(i, j) = factors.u(i, j) * factors.singular_values[j];
    for (std::size_t i = 0; i < cols; ++i) out.v(j, i) = factors.v(j, i);
  }
  return out;
}

LowRankFactors factorize_lowrank(const Matrix& b, double sv_tol) {
  SvdResult s = svd(b);
  std::size_t keep = 0;
  const double top = s.singular_values.empty() ? 0.0 : s.singular_values.front();
  while (keep < s.rank() && top > 0.0 && s.singular_values[keep] > sv_tol * top) ++keep;
  SvdResult kept;
  kept.singular_values.assign(s.singular_values.begin(), s.singular_values.begin() + keep);
  kept.u = Matrix(b.rows(), keep);
  kept.v = Matrix(keep, b.cols());
  for (std::size_t j = 0; j < keep; ++j) {
    for (std::size_t i = 0; i < b.rows(); ++i) kept.u(i, j) = s.u(i, j);
    for (std::size_t i = 0; i < b.cols(); ++i) kept.v(j, i) = s.v(j, i);
  }
  return factorize_lowrank(kept, b.rows(), b.cols());
}

Matrix CompressedLayer::lowrank_dense() const {
  if (dense_lowrank) return *dense_lowrank;
  if (lowrank && lowrank->rank() > 0) return lowrank->product();
  return Matrix(rows, cols);
}

Matrix CompressedLayer::densify() const { return sparse.densify() + lowrank_dense(); }

ParamCounts count_params(const CompressedLayer& layer) {
  ParamCounts c;
  c.original = static_cast<std::uint64_t>(layer.rows) * layer.cols;
  const std::uint64_t nz = layer.sparse.nnz_cols();
  c.sparse = static_cast<std::uint64_t>(layer.rows) * nz + nz;
  if (layer.dense_lowrank) {
    c.lowrank = c.original;
  } else if (layer.lowrank) {
    c.lowrank = static_cast<std::uint64_t>(layer.lowrank->rank()) * (layer.rows + layer.cols);
  }
  return c;
}

CompressedLayer make_compressed_layer(ColumnSparse sparse, std::optional<LowRankFactors> lowrank,
                                      LayerMetadata metadata) {
  CompressedLayer layer;
  layer.rows = sparse.rows;
  layer.cols = sparse.cols;
  sparse.validate();
  layer.sparse = std::move(sparse);
  if (lowrank && lowrank->rank() > 0) {
    if (lowrank->u.rows() != layer.rows || lowrank->v.cols() != layer.cols)
      throw ShapeError("low-rank factors do not match the sparse component's shape");
    const std::uint64_t factored = lowrank->rank() * (layer.rows + layer.cols);
    if (factored >= static_cast<std::uint64_t>(layer.rows) * layer.cols) {
      layer.dense_lowrank = lowrank->product();
    } else {
      layer.lowrank = std::move(lowrank);
    }
  }
  layer.metadata = std::move(metadata);
  layer.counts = count_params(layer);
  return layer;
}

CompressedLayer make_passthrough_layer(const Matrix& w, LayerMetadata metadata) {
  CompressedLayer layer;
  layer.rows = w.rows();
  layer.cols = w.cols();
  layer.sparse.rows = w.rows();
  layer.sparse.cols = w.cols();
  layer.sparse.packed = Matrix(w.rows(), 0);
  layer.dense_lowrank = w;
  layer.metadata = std::move(metadata);
  layer.counts = count_params(layer);
  return layer;
}

CompressionRate compression_rate(const ParamCounts& counts) {
  if (counts.original == 0) throw ConfigError("compression rate of an empty layer");
  CompressionRate cr;
  const double original = static_cast<double>(counts.original);
  cr.cr_a = 100.0 * static_cast<double>(counts.sparse) / original;
  cr.cr_b = 100.0 * static_cast<double>(counts.lowrank) / original;
  cr.cr_total = cr.cr_a + cr.cr_b;
  return cr;
}

CompressionRate compression_rate(const CompressedLayer& layer) {
  return compression_rate(layer.counts);
}

std::string describe_reduction(double cr_total_percent) {
  if (!(cr_total_percent > 0.0)) return "0.0% (no parameters kept)";
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.1f%% (%.2f\xC3\x97 reduction of model size)", cr_total_percent,
                100.0 / cr_total_percent);
  return buf;
}

// ---------------------------------------------------------------------------
// Container codec

namespace {

constexpr char kContainerMagic[4] = {'S', 'L', 'R', 'L'};

enum class LowRankKind : std::uint8_t { none = 0, factored = 1, dense = 2 };

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64s(std::span<const double> values) {
    for (double d : values) {
      std::uint64_t bits;
      std::memcpy(&bits, &d, 8);
      for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  void need(std::size_t n) const {
    if (pos_ + n > size_) throw FormatError("container truncated");
  }
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  Matrix matrix(std::size_t rows, std::size_t cols) {
    const std::size_t count = rows * cols;
    if (cols != 0 && count / cols != rows) throw FormatError("container shape overflow");
    need(count * 8);
    std::vector<double> values(count);
    for (std::size_t k = 0; k < count; ++k) {
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
      std::memcpy(&values[k], &bits, 8);
      pos_ += 8;
    }
    return Matrix(rows, cols, std::move(values));
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

nlohmann::json metadata_to_json(const CompressedLayer& layer) {
  const LayerMetadata& md = layer.metadata;
  return nlohmann::json{{"name", md.name},
                        {"hyperparams", md.hyperparams},
                        {"residual", md.residual},
                        {"iterations", md.iterations},
                        {"converged", md.converged},
                        {"provenance", md.provenance},
                        {"param_counts",
                         {{"original", layer.counts.original},
                          {"sparse", layer.counts.sparse},
                          {"lowrank", layer.counts.lowrank}}}};
}

}  // namespace

std::vector<std::uint8_t> serialize(const CompressedLayer& layer) {
  layer.sparse.validate();
  Writer w;
  w.bytes(kContainerMagic, 4);
  w.u16(kContainerVersion);
  w.u32(static_cast<std::uint32_t>(layer.rows));
  w.u32(static_cast<std::uint32_t>(layer.cols));
  w.u32(static_cast<std::uint32_t>(layer.sparse.nnz_cols()));
  for (std::uint32_t idx : layer.sparse.nz_col_indices) w.u32(idx);
  w.f64s(layer.sparse.packed.data());
  if (layer.dense_lowrank) {
    w.u8(static_cast<std::uint8_t>(LowRankKind::dense));
    w.u32(0);
    w.f64s(layer.dense_lowrank->data());
  } else if (layer.lowrank) {
    w.u8(static_cast<std::uint8_t>(LowRankKind::factored));
    w.u32(static_cast<std::uint32_t>(layer.lowrank->rank()));
    w.f64s(layer.lowrank->u.data());
    w.f64s(layer.lowrank->v.data());
  } else {
    w.u8(static_cast<std::uint8_t>(LowRankKind::none));
    w.u32(0);
  }
  const std::string meta = metadata_to_json(layer).dump();
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta.data(), meta.size());
  auto& buf = w.buffer();
  const std::uint32_t crc = crc_of(buf.data(), buf.size());
  w.u32(crc);
  return std::move(w.buffer());
}

CompressedLayer deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 10 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0)
    throw FormatError("not a compressed-layer container (bad magic)");
  Reader head(bytes.data() + 4, bytes.size() - 4);
  const std::uint16_t version = head.u16();
  if (version != kContainerVersion) throw VersionError(version, kContainerVersion);
  if (bytes.size() < 4 + 2 + 4) throw FormatError("container truncated");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
  if (crc_of(bytes.data(), body) != stored) throw CorruptionError("container checksum mismatch");

  Reader r(bytes.data() + 6, body - 6);
  CompressedLayer layer;
  layer.rows = r.u32();
  layer.cols = r.u32();
  const std::uint32_t nz = r.u32();
  layer.sparse.rows = layer.rows;
  layer.sparse.cols = layer.cols;
  r.need(static_cast<std::size_t>(nz) * 4);
  layer.sparse.nz_col_indices.resize(nz);
  for (auto& idx : layer.sparse.nz_col_indices) idx = r.u32();
  layer.sparse.packed = r.matrix(layer.rows, nz);
  layer.sparse.validate();

  const auto kind = static_cast<LowRankKind>(r.u8());
  const std::uint32_t rank = r.u32();
  switch (kind) {
    case LowRankKind::none:
      break;
    case LowRankKind::factored: {
      LowRankFactors f;
      f.u = r.matrix(layer.rows, rank);
      f.v = r.matrix(rank, layer.cols);
      layer.lowrank = std::move(f);
      break;
    }
    case LowRankKind::dense:
      layer.dense_lowrank = r.matrix(layer.rows, layer.cols);
      break;
    default:
      throw FormatError("unknown low-rank storage kind");
  }

  const std::uint32_t meta_len = r.u32();
  const std::string meta_text = r.text(meta_len);
  if (r.position() != body - 6) throw FormatError("unexpected bytes before checksum");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_text);
    layer.metadata.name = meta.at("name").get<std::string>();
    layer.metadata.hyperparams = meta.at("hyperparams");
    layer.metadata.residual = meta.at("residual").get<double>();
    layer.metadata.iterations = meta.at("iterations").get<std::uint64_t>();
    layer.metadata.converged = meta.at("converged").get<bool>();
    layer.metadata.provenance = meta.at("provenance");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container metadata: ") + e.what());
  }
  layer.counts = count_params(layer);
  const auto& pc = meta.at("param_counts");
  if (pc.at("original").get<std::uint64_t>() != layer.counts.original ||
      pc.at("sparse").get<std::uint64_t>() != layer.counts.sparse ||
      pc.at("lowrank").get<std::uint64_t>() != layer.counts.lowrank) {
    throw CorruptionError("recorded parameter counts disagree with the stored components");
  }
  return layer;
}

void save(const CompressedLayer& layer, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = serialize(layer);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write on " + path.string());
}

CompressedLayer load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on " + path.string());
  return deserialize(bytes);
}

Csr to_csr(const ColumnSparse& a) {
  Csr csr;
  csr.indptr.reserve(a.rows + 1);
  csr.indptr.push_back(0);
  for (std::size_t r = 0; r < a.rows; ++r) {
    for (std::size_t k = 0; k < a.nnz_cols(); ++k) {
      const double v = a.packed(r, k);
      if (v == 0.0) continue;
      csr.indices.push_back(a.nz_col_indices[k]);
      csr.data.push_back(v);
    }
    csr.indptr.push_back(static_cast<std::int64_t>(csr.data.size()));
  }
  return csr;
}

void export_csr(const ColumnSparse& a, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const Csr csr = to_csr(a);
  npy::write_i8(dir / "indptr.npy", {csr.indptr.size()}, csr.indptr);
  npy::write_i8(dir / "indices.npy", {csr.indices.size()}, csr.indices);
  npy::write_f8(dir / "data.npy", {csr.data.size()}, csr.data);
}

}  // namespace slr
