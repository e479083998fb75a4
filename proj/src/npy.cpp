#include "slr/npy.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <regex>
#include <sstream>

#include "slr/errors.hpp"

static_assert(std::endian::native == std::endian::little, "NPY codec assumes a little-endian host");

namespace slr::npy {
namespace {

constexpr char kMagic[] = "\x93NUMPY";
constexpr std::size_t kMagicLen = 6;

std::size_t element_size(Dtype d) {
  switch (d) {
    case Dtype::f4:
    case Dtype::i4:
      return 4;
    case Dtype::f8:
    case Dtype::i8:
      return 8;
  }
  return 8;
}

Dtype parse_descr(const std::string& descr, const std::filesystem::path& path) {
  if (descr == "<f8") return Dtype::f8;
  if (descr == "<f4") return Dtype::f4;
  if (descr == "<i8") return Dtype::i8;
  if (descr == "<i4") return Dtype::i4;
  throw DtypeError(path.string() + ": unsupported dtype '" + descr + "'");
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on " + path.string());
  return bytes;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    s += std::to_string(shape[i]);
    if (shape.size() == 1 || i + 1 < shape.size()) s += ",";
    if (i + 1 < shape.size()) s += " ";
  }
  return s + ")";
}

void write_raw(const std::filesystem::path& path, const char* descr,
               const std::vector<std::size_t>& shape, const void* payload, std::size_t bytes) {
  std::string dict = std::string("{'descr': '") + descr + "', 'fortran_order': False, 'shape': " +
                     shape_string(shape) + ", }";
  // magic(6) + version(2) + header_len(2) + dict + padding + '\n' is a multiple of 64.
  const std::size_t unpadded = kMagicLen + 4 + dict.size() + 1;
  dict.append((64 - unpadded % 64) % 64, ' ');
  dict.push_back('\n');

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kMagic, kMagicLen);
  const char version[2] = {1, 0};
  out.write(version, 2);
  const auto len = static_cast<std::uint16_t>(dict.size());
  const char len_bytes[2] = {static_cast<char>(len & 0xff), static_cast<char>(len >> 8)};
  out.write(len_bytes, 2);
  out.write(dict.data(), static_cast<std::streamsize>(dict.size()));
  out.write(static_cast<const char*>(payload), static_cast<std::streamsize>(bytes));
  if (!out) throw IoError("short write on " + path.string());
}

}  // namespace

Array read(const std::filesystem::path& path) {
  const std::string bytes = read_all(path);
  if (bytes.size() < kMagicLen + 4 || std::memcmp(bytes.data(), kMagic, kMagicLen) != 0) {
    throw FormatError(path.string() + ": not an NPY file (bad magic)");
  }
  const auto major = static_cast<unsigned char>(bytes[6]);
  std::size_t header_len = 0;
  std::size_t offset = 0;
  if (major == 1) {
    header_len = static_cast<unsigned char>(bytes[8]) |
                 (static_cast<std::size_t>(static_cast<unsigned char>(bytes[9])) << 8);
    offset = 10;
  } else if (major == 2 || major == 3) {
    if (bytes.size() < 12) throw FormatError(path.string() + ": truncated header");
    for (int i = 0; i < 4; ++i)
      header_len |= static_cast<std::size_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    offset = 12;
  } else {
    throw FormatError(path.string() + ": unsupported NPY version " + std::to_string(major));
  }
  if (bytes.size() < offset + header_len) throw FormatError(path.string() + ": truncated header");
  const std::string header = bytes.substr(offset, header_len);

  static const std::regex descr_re(R"('descr'\s*:\s*'([^']*)')");
  static const std::regex order_re(R"('fortran_order'\s*:\s*(True|False))");
  static const std::regex shape_re(R"('shape'\s*:\s*\(([^)]*)\))");
  std::smatch m;
  if (!std::regex_search(header, m, descr_re)) throw FormatError(path.string() + ": header lacks descr");
  Array out;
  out.dtype = parse_descr(m[1], path);
  if (!std::regex_search(header, m, order_re))
    throw FormatError(path.string() + ": header lacks fortran_order");
  if (m[1] == "True") throw DtypeError(path.string() + ": Fortran-order arrays are not supported");
  if (!std::regex_search(header, m, shape_re)) throw FormatError(path.string() + ": header lacks shape");
  {
    std::string dims = m[1];
    std::stringstream ss(dims);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto first = item.find_first_not_of(" \t");
      if (first == std::string::npos) continue;
      try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(item.substr(first), &used);
        out.shape.push_back(static_cast<std::size_t>(v));
      } catch (const std::exception&) {
        throw FormatError(path.string() + ": bad shape entry '" + item + "'");
      }
    }
  }

  const std::size_t count =
      std::accumulate(out.shape.begin(), out.shape.end(), std::size_t{1}, std::multiplies<>());
  const std::size_t esize = element_size(out.dtype);
  const std::size_t payload = bytes.size() - offset - header_len;
  if (payload < count * esize) {
    throw FormatError(path.string() + ": truncated payload (" + std::to_string(payload) +
                      " bytes, expected " + std::to_string(count * esize) + ")");
  }
  if (payload > count * esize) {
    throw FormatError(path.string() + ": " + std::to_string(payload - count * esize) +
                      " trailing bytes after payload");
  }
  const char* p = bytes.data() + offset + header_len;
  out.values.resize(count);
  for (std::size_t i = 0; i < count; ++i, p += esize) {
    switch (out.dtype) {
      case Dtype::f8: {
        double v;
        std::memcpy(&v, p, 8);
        out.values[i] = v;
        break;
      }
      case Dtype::f4: {
        float v;
        std::memcpy(&v, p, 4);
        out.values[i] = v;
        break;
      }
      case Dtype::i8: {
        std::int64_t v;
        std::memcpy(&v, p, 8);
        out.values[i] = static_cast<double>(v);
        break;
      }
      case Dtype::i4: {
        std::int32_t v;
        std::memcpy(&v, p, 4);
        out.values[i] = v;
        break;
      }
    }
  }
  return out;
}

namespace {

void require_float(const Array& a, const std::filesystem::path& path) {
  if (a.dtype != Dtype::f4 && a.dtype != Dtype::f8)
    throw DtypeError(path.string() + ": expected a float array");
}

}  // namespace

Matrix read_matrix(const std::filesystem::path& path) {
  Array a = read(path);
  require_float(a, path);
  if (a.shape.size() == 1) return Matrix(1, a.shape[0], std::move(a.values));
  if (a.shape.size() != 2)
    throw DtypeError(path.string() + ": expected a 2-D array, found rank " +
                     std::to_string(a.shape.size()));
  return Matrix(a.shape[0], a.shape[1], std::move(a.values));
}

Tensor4 read_tensor4(const std::filesystem::path& path) {
  Array a = read(path);
  require_float(a, path);
  if (a.shape.size() != 4)
    throw DtypeError(path.string() + ": expected a 4-D array, found rank " +
                     std::to_string(a.shape.size()));
  Tensor4 t;
  t.n = a.shape[0];
  t.c = a.shape[1];
  t.kh = a.shape[2];
  t.kw = a.shape[3];
  t.data = std::move(a.values);
  return t;
}

WeightArray read_weights(const std::filesystem::path& path) {
  Array a = read(path);
  require_float(a, path);
  if (a.shape.size() == 2) return Matrix(a.shape[0], a.shape[1], std::move(a.values));
  if (a.shape.size() == 4) {
    Tensor4 t;
    t.n = a.shape[0];
    t.c = a.shape[1];
    t.kh = a.shape[2];
    t.kw = a.shape[3];
    t.data = std::move(a.values);
    return t;
  }
  throw DtypeError(path.string() + ": weights must be 2-D or 4-D");
}

void write(const std::filesystem::path& path, const Matrix& m) {
  write_raw(path, "<f8", {m.rows(), m.cols()}, m.data().data(), m.size() * sizeof(double));
}

void write(const std::filesystem::path& path, const Tensor4& t) {
  write_raw(path, "<f8", {t.n, t.c, t.kh, t.kw}, t.data.data(), t.data.size() * sizeof(double));
}

void write_f8(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
              const std::vector<double>& values) {
  write_raw(path, "<f8", shape, values.data(), values.size() * sizeof(double));
}

void write_i8(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
              const std::vector<std::int64_t>& values) {
  write_raw(path, "<i8", shape, values.data(), values.size() * sizeof(std::int64_t));
}

}  // namespace slr::npy
