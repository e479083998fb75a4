#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "slr/matrix.hpp"
#include "slr/tensor.hpp"

namespace slr::npy {

enum class Dtype { f4, f8, i4, i8 };

/// Decoded NPY array, values widened to double.
struct Array {
  std::vector<std::size_t> shape;
  Dtype dtype = Dtype::f8;
  std::vector<double> values;
};

/// Read a version 1.x/2.x NPY file (little-endian f4/f8/i4/i8, C order).
///
/// Throws IoError when the file cannot be read, FormatError for a malformed
/// header or truncated payload, DtypeError for unsupported dtypes or layouts.
Array read(const std::filesystem::path& path);

/// 2-D float array. A 1-D array of length k is read as a 1 x k row.
Matrix read_matrix(const std::filesystem::path& path);

/// 4-D float array (filters).
Tensor4 read_tensor4(const std::filesystem::path& path);

/// Either a lowered weight matrix or a filter bank, depending on the rank on disk.
using WeightArray = std::variant<Matrix, Tensor4>;
WeightArray read_weights(const std::filesystem::path& path);

/// Write little-endian '<f8' in NPY 1.0.
void write(const std::filesystem::path& path, const Matrix& m);
void write(const std::filesystem::path& path, const Tensor4& t);
void write_f8(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
              const std::vector<double>& values);

/// Write little-endian '<i8' in NPY 1.0.
void write_i8(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
              const std::vector<std::int64_t>& values);

}  // namespace slr::npy
