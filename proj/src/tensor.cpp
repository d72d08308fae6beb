#include "cnncert/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cnncert {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string to_string(const Shape3& shape) { return to_string(shape.to_shape()); }

std::size_t shape_product(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_product(shape_), fill) {
  if (!std::isfinite(fill)) throw Error("tensor fill value is not finite");
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    throw Error("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                to_string(shape_));
  }
  if (!all_finite()) throw Error("tensor contains non-finite values");
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) throw Error("axis out of range for shape " + to_string(shape_));
  return shape_[axis];
}

Shape3 Tensor::shape3() const {
  if (rank() != 3) throw Error("expected a rank-3 (H,W,C) tensor, got shape " + to_string(shape_));
  return {shape_[0], shape_[1], shape_[2]};
}

double& Tensor::at(std::size_t y, std::size_t x, std::size_t k) {
  return data_[(y * shape_[1] + x) * shape_[2] + k];
}

double Tensor::at(std::size_t y, std::size_t x, std::size_t k) const {
  return data_[(y * shape_[1] + x) * shape_[2] + k];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding, const char* axis) {
  if (stride == 0) throw Error(std::string("stride along ") + axis + " must be >= 1");
  if (kernel == 0) throw Error(std::string("kernel extent along ") + axis + " must be >= 1");
  if (in + 2 * padding < kernel) {
    throw Error(std::string("kernel extent ") + std::to_string(kernel) + " exceeds padded input " +
                std::to_string(in + 2 * padding) + " along " + axis);
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

void ConvGeometry::validate(const Shape3& input) const {
  if (input.c != in_channels) {
    throw Error("input channels " + std::to_string(input.c) + " do not match kernel in_channels " +
                std::to_string(in_channels));
  }
  if (out_channels == 0) throw Error("out_channels must be >= 1");
  (void)output_shape(input);
}

Shape3 ConvGeometry::output_shape(const Shape3& input) const {
  return {conv_output_extent(input.h, kernel.h, stride.h, padding.h, "height"),
          conv_output_extent(input.w, kernel.w, stride.w, padding.w, "width"), out_channels};
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, const ConvGeometry& geom) {
  const Shape3 in = input.shape3();
  geom.validate(in);
  const Shape expected_kernel{geom.kernel.h, geom.kernel.w, geom.in_channels, geom.out_channels};
  if (kernel.shape() != expected_kernel) {
    throw Error("kernel shape " + to_string(kernel.shape()) + " does not match geometry " +
                to_string(expected_kernel));
  }
  if (bias.size() != geom.out_channels) {
    throw Error("bias length " + std::to_string(bias.size()) + " does not match out_channels " +
                std::to_string(geom.out_channels));
  }
  const Shape3 out = geom.output_shape(in);
  Tensor result(out);
  const auto kd = kernel.data();
  for (std::size_t y = 0; y < out.h; ++y) {
    for (std::size_t x = 0; x < out.w; ++x) {
      double* dst = &result.at(y, x, 0);
      for (std::size_t z = 0; z < out.c; ++z) dst[z] = bias[z];
      for (std::size_t i = 0; i < geom.kernel.h; ++i) {
        const auto iy = static_cast<std::ptrdiff_t>(y * geom.stride.h + i) -
                        static_cast<std::ptrdiff_t>(geom.padding.h);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
        for (std::size_t j = 0; j < geom.kernel.w; ++j) {
          const auto ix = static_cast<std::ptrdiff_t>(x * geom.stride.w + j) -
                          static_cast<std::ptrdiff_t>(geom.padding.w);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
          const double* src = &input.data()[in.index(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), 0)];
          const double* w = &kd[(i * geom.kernel.w + j) * in.c * out.c];
          for (std::size_t k = 0; k < in.c; ++k) {
            const double v = src[k];
            if (v == 0.0) continue;
            for (std::size_t z = 0; z < out.c; ++z) dst[z] += w[k * out.c + z] * v;
          }
        }
      }
    }
  }
  return result;
}

NormOrder parse_norm(const std::string& text) {
  if (text == "1" || text == "l1") return NormOrder::L1;
  if (text == "2" || text == "l2") return NormOrder::L2;
  if (text == "inf" || text == "linf" || text == "Inf" || text == "i") return NormOrder::Linf;
  throw Error("unsupported norm order '" + text + "'; supported orders are 1, 2, inf");
}

std::string to_string(NormOrder p) {
  switch (p) {
    case NormOrder::L1: return "1";
    case NormOrder::L2: return "2";
    case NormOrder::Linf: return "inf";
  }
  return "?";
}

NormOrder dual_exponent(NormOrder p) {
  switch (p) {
    case NormOrder::L1: return NormOrder::Linf;
    case NormOrder::L2: return NormOrder::L2;
    case NormOrder::Linf: return NormOrder::L1;
  }
  throw Error("unsupported norm order; supported orders are 1, 2, inf");
}

double dual_norm(std::span<const double> values, NormOrder q) {
  double acc = 0.0;
  switch (q) {
    case NormOrder::L1:
      for (double v : values) acc += std::abs(v);
      break;
    case NormOrder::L2:
      for (double v : values) acc += v * v;
      acc = std::sqrt(acc);
      break;
    case NormOrder::Linf:
      for (double v : values) acc = std::max(acc, std::abs(v));
      break;
  }
  if (!std::isfinite(acc)) throw Error("dual_norm: non-finite input");
  return acc;
}

std::pair<Tensor, Tensor> sign_split(const Tensor& t) {
  Tensor plus(t.shape()), minus(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] > 0) plus[i] = t[i];
    else if (t[i] < 0) minus[i] = t[i];
  }
  return {std::move(plus), std::move(minus)};
}

}  // namespace cnncert
