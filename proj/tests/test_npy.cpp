#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>

#include "json.hpp"
#include "oracles.hpp"
#include "slr/errors.hpp"
#include "slr/inference.hpp"
#include "slr/npy.hpp"

namespace fs = std::filesystem;
using slr::Matrix;

namespace {

const fs::path fixtures{SLR_FIXTURES};

nlohmann::json expected() {
  std::ifstream in(fixtures / "expected.json");
  return nlohmann::json::parse(in);
}

Matrix from_json(const nlohmann::json& j) {
  Matrix m(j.size(), j[0].size());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t k = 0; k < m.cols(); ++k) m(i, k) = j[i][k].get<double>();
  return m;
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "slr_test_npy";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("write then read round trips bit-exactly") {
  std::mt19937_64 rng(11);
  const Matrix m = oracle::random(rng, 7, 5);
  const fs::path p = temp_path("rt.npy");
  slr::npy::write(p, m);
  CHECK(slr::npy::read_matrix(p) == m);

  slr::Tensor4 t(2, 3, 2, 2);
  for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = 0.5 * static_cast<double>(i);
  slr::npy::write(p, t);
  CHECK(slr::npy::read_tensor4(p) == t);
  CHECK(std::holds_alternative<slr::Tensor4>(slr::npy::read_weights(p)));
  CHECK_THROWS_AS(slr::npy::read_matrix(p), slr::DtypeError);
}

TEST_CASE("empty matrices round trip") {
  const fs::path p = temp_path("empty.npy");
  slr::npy::write(p, Matrix(3, 0));
  const Matrix back = slr::npy::read_matrix(p);
  CHECK(back.rows() == 3);
  CHECK(back.cols() == 0);
}

TEST_CASE("integer arrays round trip") {
  const fs::path p = temp_path("ints.npy");
  slr::npy::write_i8(p, {2, 2}, {-5, 0, 7, 1LL << 40});
  const auto a = slr::npy::read(p);
  CHECK(a.dtype == slr::npy::Dtype::i8);
  CHECK(a.values == std::vector<double>{-5, 0, 7, static_cast<double>(1LL << 40)});
}

TEST_CASE("fixtures written by numpy") {
  const auto e = expected();
  const Matrix small = from_json(e["small"]);
  CHECK(slr::npy::read_matrix(fixtures / "small_f8.npy") == small);
  CHECK(slr::npy::read_matrix(fixtures / "small_f4.npy") == small);  // exact in f4
  CHECK(slr::npy::read_matrix(fixtures / "small_v2.npy") == small);
  const auto i4 = slr::npy::read(fixtures / "small_i4.npy");
  CHECK(i4.dtype == slr::npy::Dtype::i4);
  CHECK(Matrix(2, 3, i4.values) == from_json(e["small_i4"]));
  const auto i8 = slr::npy::read(fixtures / "small_i8.npy");
  CHECK(i8.dtype == slr::npy::Dtype::i8);
  CHECK(Matrix(3, 2, i8.values) == from_json(e["small_i8"]));
  // Weights and feature maps must be floating point.
  CHECK_THROWS_AS(slr::npy::read_matrix(fixtures / "small_i4.npy"), slr::DtypeError);
  CHECK(slr::npy::read(fixtures / "small_f4.npy").dtype == slr::npy::Dtype::f4);

  const Matrix v = slr::npy::read_matrix(fixtures / "vector_f8.npy");
  CHECK(v.rows() == 1);
  CHECK(v.column(1) == std::vector<double>{-2.0});
  CHECK(slr::npy::read(fixtures / "vector_f8.npy").shape == std::vector<std::size_t>{3});

  const auto w = slr::npy::read_weights(fixtures / "toy_w.npy");
  REQUIRE(std::holds_alternative<slr::Tensor4>(w));
  CHECK(slr::lower_filter(std::get<slr::Tensor4>(w)) == from_json(e["toy_w_lowered"]));
}

TEST_CASE("unsupported layouts are dtype errors") {
  CHECK_THROWS_AS(slr::npy::read(fixtures / "big_endian.npy"), slr::DtypeError);
  CHECK_THROWS_AS(slr::npy::read(fixtures / "fortran.npy"), slr::DtypeError);
  CHECK_THROWS_AS(slr::npy::read(fixtures / "complex.npy"), slr::DtypeError);
}

TEST_CASE("malformed files") {
  CHECK_THROWS_AS(slr::npy::read(fixtures / "no_such_file.npy"), slr::IoError);

  std::ifstream in(fixtures / "small_f8.npy", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  const fs::path cut = temp_path("cut.npy");
  {
    std::ofstream out(cut, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 8));
  }
  CHECK_THROWS_AS(slr::npy::read(cut), slr::FormatError);

  const fs::path magic = temp_path("magic.npy");
  {
    std::ofstream out(magic, std::ios::binary);
    std::string b = bytes;
    b[1] = 'X';
    out << b;
  }
  CHECK_THROWS_AS(slr::npy::read(magic), slr::FormatError);

  const fs::path header = temp_path("header.npy");
  {
    std::ofstream out(header, std::ios::binary);
    out.write(bytes.data(), 20);
  }
  CHECK_THROWS_AS(slr::npy::read(header), slr::FormatError);
}

TEST_CASE("exported conv layer reproduces its recorded response") {
  const auto w = std::get<slr::Tensor4>(slr::npy::read_weights(fixtures / "toy_w.npy"));
  const Matrix lowered = slr::lower_filter(w);
  for (int i = 0; i < 2; ++i) {
    const Matrix x = slr::npy::read_matrix(fixtures / ("toy_x" + std::to_string(i) + ".npy"));
    const Matrix y = slr::npy::read_matrix(fixtures / ("toy_y" + std::to_string(i) + ".npy"));
    CHECK(x.rows() == 18);
    CHECK(x.cols() == 25);
    const Matrix got = slr::forward_dense(lowered, x, slr::Activation::relu);
    CHECK(slr::max_relative_error(got, y) <= 1e-5);
  }
}
