#include "slr/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <string>

#include "slr/errors.hpp"

namespace slr {

std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "identity" || name == "linear") return Activation::identity;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

Tensor4::Tensor4(std::size_t n, std::size_t c, std::size_t kh, std::size_t kw, double fill)
    : n(n), c(c), kh(kh), kw(kw), data(n * c * kh * kw, fill) {}

Tensor3::Tensor3(std::size_t c, std::size_t h, std::size_t w, double fill)
    : c(c), h(h), w(w), data(c * h * w, fill) {}

void ConvGeometry::validate() const {
  std::ostringstream msg;
  if (channels == 0 || in_h == 0 || in_w == 0) {
    msg << "geometry has an empty input extent";
  } else if (kernel == 0 || stride == 0) {
    msg << "kernel and stride must be positive";
  } else if (in_h + 2 * pad < kernel || in_w + 2 * pad < kernel) {
    msg << "kernel " << kernel << " larger than padded input " << in_h + 2 * pad << "x"
        << in_w + 2 * pad;
  } else {
    return;
  }
  throw GeometryError(msg.str());
}

std::size_t ConvGeometry::out_h() const {
  validate();
  return (in_h + 2 * pad - kernel) / stride + 1;
}

std::size_t ConvGeometry::out_w() const {
  validate();
  return (in_w + 2 * pad - kernel) / stride + 1;
}

Matrix relu(Matrix x) {
  for (double& v : x.data()) v = std::max(v, 0.0);
  return x;
}

Matrix activate(Matrix x, Activation a) {
  return a == Activation::relu ? relu(std::move(x)) : x;
}

Matrix lower_filter(const Tensor4& w) {
  const std::size_t cols = w.c * w.kh * w.kw;
  if (w.data.size() != w.n * cols) throw ShapeError("filter tensor data length mismatch");
  return Matrix(w.n, cols, w.data);
}

Tensor4 unlower_filter(const Matrix& w, std::size_t channels, std::size_t kh, std::size_t kw) {
  if (w.cols() != channels * kh * kw) throw ShapeError("lowered filter width mismatch");
  Tensor4 t(w.rows(), channels, kh, kw);
  std::copy(w.data().begin(), w.data().end(), t.data.begin());
  return t;
}

Matrix im2col(const Tensor3& input, const ConvGeometry& geom) {
  geom.validate();
  if (input.c != geom.channels || input.h != geom.in_h || input.w != geom.in_w ||
      input.data.size() != input.c * input.h * input.w) {
    std::ostringstream msg;
    msg << "input " << input.c << "x" << input.h << "x" << input.w << " does not match geometry "
        << geom.channels << "x" << geom.in_h << "x" << geom.in_w;
    throw GeometryError(msg.str());
  }
  const std::size_t oh = geom.out_h(), ow = geom.out_w(), k = geom.kernel;
  Matrix cols(geom.patch_size(), oh * ow);
  for (std::size_t ch = 0; ch < geom.channels; ++ch) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::size_t r = (ch * k + ky) * k + kx;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          // Signed arithmetic: padded coordinates may be negative.
          const long long y = static_cast<long long>(oy * geom.stride + ky) -
                              static_cast<long long>(geom.pad);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long long x = static_cast<long long>(ox * geom.stride + kx) -
                                static_cast<long long>(geom.pad);
            double v = 0.0;
            if (y >= 0 && x >= 0 && y < static_cast<long long>(geom.in_h) &&
                x < static_cast<long long>(geom.in_w)) {
              v = input.at(ch, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
            }
            cols(r, oy * ow + ox) = v;
          }
        }
      }
    }
  }
  return cols;
}

Tensor3 as_feature_map(const Matrix& response, std::size_t h, std::size_t w) {
  if (response.cols() != h * w) {
    throw GeometryError("response has " + std::to_string(response.cols()) +
                        " positions, expected " + std::to_string(h * w));
  }
  Tensor3 map(response.rows(), h, w);
  std::copy(response.data().begin(), response.data().end(), map.data.begin());
  return map;
}

}  // namespace slr
