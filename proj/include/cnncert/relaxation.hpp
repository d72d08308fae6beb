#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cnncert/model.hpp"
#include "cnncert/tensor.hpp"

namespace cnncert {

/// A single line y -> slope * y + offset. The offset is the product
/// alpha * beta of the (alpha, beta) form, so a zero slope still carries a
/// constant bound.
struct LinearBound {
  double slope = 0.0;
  double offset = 0.0;

  [[nodiscard]] double operator()(double y) const { return slope * y + offset; }
  /// beta = offset / slope; zero when the slope vanishes.
  [[nodiscard]] double beta() const { return slope != 0.0 ? offset / slope : 0.0; }
};

struct NeuronRelaxation {
  LinearBound upper;
  LinearBound lower;
};

/// Per-neuron linear relaxations of an activation layer:
/// slope_lower * y + offset_lower <= act(y) <= slope_upper * y + offset_upper on [l, u].
struct Relaxation {
  Tensor slope_upper;
  Tensor offset_upper;
  Tensor slope_lower;
  Tensor offset_lower;

  [[nodiscard]] NeuronRelaxation neuron(std::size_t i) const {
    return {{slope_upper[i], offset_upper[i]}, {slope_lower[i], offset_lower[i]}};
  }
  [[nodiscard]] std::size_t size() const { return slope_upper.size(); }
};

enum class ReluRelaxation { FastLin, Adaptive };

ReluRelaxation parse_relu_relaxation(const std::string& text);
std::string to_string(ReluRelaxation mode);

NeuronRelaxation relax_relu_fastlin(double l, double u);
NeuronRelaxation relax_relu_adaptive(double l, double u);
/// Tangent/chord bounds for sigmoid, tanh and arctan (convex below zero,
/// concave above).
NeuronRelaxation relax_smooth(Activation kind, double l, double u);
/// Dispatches on the activation; Activation::None yields the exact identity.
NeuronRelaxation relax_neuron(Activation kind, ReluRelaxation relu_mode, double l, double u);

Relaxation relax_relu_fastlin(const Tensor& l, const Tensor& u);
Relaxation relax_relu_adaptive(const Tensor& l, const Tensor& u);
Relaxation relax_smooth(Activation kind, const Tensor& l, const Tensor& u);
Relaxation relax_activation(Activation kind, ReluRelaxation relu_mode, const Tensor& l, const Tensor& u);

/// Upper and lower bounding planes of max(x_1..x_n) over the box [l, u]:
///   U(x) = sum_i c_i x_i + upper_constant,  L(x) = sum_i c_i x_i + lower_constant.
/// Both planes share the coefficients c_i in [0, 1].
struct PoolPlanes {
  std::vector<double> coefficients;
  double upper_constant = 0.0;
  double lower_constant = 0.0;
  // Diagnostics of the construction.
  double gamma0 = 0.0;
  double gamma = 0.0;
  double coefficient_sum = 0.0;  // G
  double eta = 0.0;
  std::vector<bool> kept;

  [[nodiscard]] double upper(std::span<const double> x) const;
  [[nodiscard]] double lower(std::span<const double> x) const;
};

PoolPlanes maxpool_planes(std::span<const double> l, std::span<const double> u);
PoolPlanes avgpool_planes(std::size_t window_size);
inline PoolPlanes avgpool_planes(Extent2 window) { return avgpool_planes(window.h * window.w); }

}  // namespace cnncert
