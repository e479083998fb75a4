#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "slr/matrix.hpp"

namespace slr {

enum class Activation { relu, identity };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view name);

/// Filter bank n x c x kh x kw, row-major in that order.
struct Tensor4 {
  std::size_t n = 0, c = 0, kh = 0, kw = 0;
  std::vector<double> data;

  Tensor4() = default;
  Tensor4(std::size_t n, std::size_t c, std::size_t kh, std::size_t kw, double fill = 0.0);

  double& at(std::size_t f, std::size_t ch, std::size_t y, std::size_t x) {
    return data[((f * c + ch) * kh + y) * kw + x];
  }
  double at(std::size_t f, std::size_t ch, std::size_t y, std::size_t x) const {
    return data[((f * c + ch) * kh + y) * kw + x];
  }
  bool operator==(const Tensor4&) const = default;
};

/// Feature map c x h x w, row-major in that order.
struct Tensor3 {
  std::size_t c = 0, h = 0, w = 0;
  std::vector<double> data;

  Tensor3() = default;
  Tensor3(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0);

  double& at(std::size_t ch, std::size_t y, std::size_t x) { return data[(ch * h + y) * w + x]; }
  double at(std::size_t ch, std::size_t y, std::size_t x) const {
    return data[(ch * h + y) * w + x];
  }
};

struct ConvGeometry {
  std::size_t in_h = 0, in_w = 0;
  std::size_t channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  /// Throws GeometryError unless the output extent is at least 1x1.
  void validate() const;
  std::size_t out_h() const;
  std::size_t out_w() const;
  std::size_t positions() const { return out_h() * out_w(); }
  std::size_t patch_size() const { return channels * kernel * kernel; }
};

Matrix relu(Matrix x);
Matrix activate(Matrix x, Activation a);

/// Reshape n x c x kh x kw filters to n x (c*kh*kw). Columns run channel-major,
/// then kernel row, then kernel column; im2col uses the same order.
Matrix lower_filter(const Tensor4& w);

/// Inverse of lower_filter for known kernel extents.
Tensor4 unlower_filter(const Matrix& w, std::size_t channels, std::size_t kh, std::size_t kw);

/// Unroll every receptive field of `input` into one column. Columns follow the
/// output raster order; zero padding.
Matrix im2col(const Tensor3& input, const ConvGeometry& geom);

/// View an n x (h*w) layer response as an n-channel feature map.
Tensor3 as_feature_map(const Matrix& response, std::size_t h, std::size_t w);

}  // namespace slr
