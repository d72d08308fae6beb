#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cnncert {

/// Raised for every contract violation in the library (bad shapes, malformed
/// models, unsupported options). Messages name the offending field.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

/// Height/width pair used for kernel extents, strides and paddings.
struct Extent2 {
  std::size_t h = 0;
  std::size_t w = 0;

  friend bool operator==(const Extent2&, const Extent2&) = default;
};

/// Height, width, channel extents of an activation tensor.
struct Shape3 {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t c = 0;

  [[nodiscard]] std::size_t size() const { return h * w * c; }
  [[nodiscard]] std::size_t index(std::size_t y, std::size_t x, std::size_t k) const {
    return (y * w + x) * c + k;
  }
  [[nodiscard]] Shape to_shape() const { return {h, w, c}; }

  friend bool operator==(const Shape3&, const Shape3&) = default;
};

std::string to_string(const Shape& shape);
std::string to_string(const Shape3& shape);

/// Dense row-major tensor of doubles. Rank-3 tensors are laid out
/// height-width-channel; convolution kernels are (kh, kw, cin, cout).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  /// Takes ownership of `data`; throws if its length does not match the shape
  /// product or any value is non-finite.
  Tensor(Shape shape, std::vector<double> data);
  explicit Tensor(const Shape3& shape, double fill = 0.0) : Tensor(shape.to_shape(), fill) {}

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t rank() const { return shape_.size(); }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] std::size_t extent(std::size_t axis) const;

  /// Interprets a rank-3 tensor as HWC.
  [[nodiscard]] Shape3 shape3() const;

  [[nodiscard]] std::span<const double> data() const { return data_; }
  [[nodiscard]] std::span<double> data() { return data_; }
  [[nodiscard]] const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t y, std::size_t x, std::size_t k);
  [[nodiscard]] double at(std::size_t y, std::size_t x, std::size_t k) const;

  [[nodiscard]] bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t shape_product(const Shape& shape);

struct ConvGeometry {
  Extent2 kernel{1, 1};
  Extent2 stride{1, 1};
  Extent2 padding{0, 0};
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;

  /// Throws unless strides and kernel extents are positive and the window
  /// fits into the padded input.
  void validate(const Shape3& input) const;
  [[nodiscard]] Shape3 output_shape(const Shape3& input) const;

  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

/// Number of window positions along one axis; throws when the padded input
/// is smaller than the kernel.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding, const char* axis);

/// output[x,y,z] = sum_{i,j,k} kernel[i,j,k,z] * input[s1 x + i - p1, s2 y + j - p2, k] + bias[z],
/// with out-of-range input positions contributing zero.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, const ConvGeometry& geom);

enum class NormOrder { L1, L2, Linf };

/// Parses "1", "2", "inf" (also "linf", "l1", "l2").
NormOrder parse_norm(const std::string& text);
std::string to_string(NormOrder p);

/// Hoelder conjugate: 1/p + 1/q = 1.
NormOrder dual_exponent(NormOrder p);

double dual_norm(std::span<const double> values, NormOrder q);
inline double dual_norm(const Tensor& t, NormOrder q) { return dual_norm(t.data(), q); }

/// Splits into (positive part, negative part); plus + minus == t.
std::pair<Tensor, Tensor> sign_split(const Tensor& t);

}  // namespace cnncert
