#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace crackgen {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Binary or label mask indexed (row = y, col = x).
using Mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Thrown for shape and argument contract violations.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a computation produces NaN/Inf or diverges.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, long step = -1)
      : std::runtime_error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

/// Channel-major feature map. Rows are channels; columns are pixels in
/// row-major scan order (pixel index = y * width + x). Storage is therefore
/// interleaved HWC, which matches 8-bit image files.
template <typename Scalar>
struct Tensor {
  Matrix<Scalar> data;
  Index height = 0;
  Index width = 0;

  Tensor() = default;
  Tensor(Index channels, Index h, Index w)
      : data(Matrix<Scalar>::Zero(channels, h * w)), height(h), width(w) {}
  Tensor(Matrix<Scalar> values, Index h, Index w)
      : data(std::move(values)), height(h), width(w) {
    if (data.cols() != h * w) throw ShapeError("tensor: cols != height*width");
  }

  Index channels() const { return data.rows(); }
  Index pixels() const { return data.cols(); }
  bool empty() const { return data.size() == 0; }

  Scalar& operator()(Index c, Index y, Index x) { return data(c, y * width + x); }
  Scalar operator()(Index c, Index y, Index x) const { return data(c, y * width + x); }

  bool same_shape(const Tensor& o) const {
    return channels() == o.channels() && height == o.height && width == o.width;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(data.template cast<Other>(), height, width);
  }

  bool operator==(const Tensor& o) const {
    return same_shape(o) && data == o.data;
  }
};

/// RGB image in [0,1], float storage.
using Image = Tensor<float>;

inline std::string shape_string(Index c, Index h, Index w) {
  return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

template <typename Scalar>
std::string shape_string(const Tensor<Scalar>& t) {
  return shape_string(t.channels(), t.height, t.width);
}

template <typename Scalar>
bool all_finite(const Tensor<Scalar>& t) {
  return t.data.allFinite();
}

/// Luma grayscale (0.299, 0.587, 0.114) of an RGB tensor as an H x W matrix.
template <typename Scalar>
Matrix<Scalar> grayscale(const Tensor<Scalar>& rgb) {
  if (rgb.channels() != 3) throw ShapeError("grayscale: expected 3 channels, got " + shape_string(rgb));
  Matrix<Scalar> out(rgb.height, rgb.width);
  for (Index y = 0; y < rgb.height; ++y)
    for (Index x = 0; x < rgb.width; ++x)
      out(y, x) = Scalar(0.299) * rgb(0, y, x) + Scalar(0.587) * rgb(1, y, x) +
                  Scalar(0.114) * rgb(2, y, x);
  return out;
}

/// Quantize values in [0,1] to the nearest multiple of 1/255.
inline Image quantize8(const Image& img) {
  Image out = img;
  out.data = (img.data.array().max(0.f).min(1.f) * 255.f).round() / 255.f;
  return out;
}

}  // namespace crackgen
