#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cnncert/model.hpp"
#include "cnncert/relaxation.hpp"
#include "cnncert/tensor.hpp"

namespace cnncert {

/// Elementwise interval [lower, upper] over one layer.
struct IntervalBounds {
  Tensor lower;
  Tensor upper;

  [[nodiscard]] std::size_t size() const { return lower.size(); }
};

/// Window placement of a location-dependent convolutional map: target
/// location (x, y) reads source positions origin + (i, j) with
/// origin = stride * (x, y) - padding, for (i, j) in [0, kernel).
struct MapGeometry {
  Extent2 kernel{1, 1};
  Extent2 stride{1, 1};
  Extent2 padding{0, 0};
  std::size_t channels = 1;

  [[nodiscard]] std::size_t taps() const { return kernel.h * kernel.w * channels; }
  friend bool operator==(const MapGeometry&, const MapGeometry&) = default;
};

/// Linear bounds of a target layer in terms of a source layer:
///   A_lower * source + B_lower <= target <= A_upper * source + B_upper.
/// Each target neuron owns its own kernel (kernel.h x kernel.w x channels);
/// coefficients on positions outside the source layer are kept as zeros.
class LinearBoundMap {
 public:
  static LinearBoundMap identity(const Shape3& layer, LayerRef ref = {});
  /// `count` linear forms over a whole layer (row-major, HWC order per row),
  /// as a map with target shape (1, 1, count).
  static LinearBoundMap linear_forms(const Shape3& layer, std::span<const double> rows, std::size_t count,
                                     LayerRef ref);

  [[nodiscard]] const Shape3& target_shape() const { return target_; }
  [[nodiscard]] const Shape3& source_shape() const { return source_; }
  [[nodiscard]] const MapGeometry& geometry() const { return geom_; }
  [[nodiscard]] const LayerRef& source_layer() const { return source_ref_; }
  [[nodiscard]] std::size_t num_targets() const { return target_.size(); }

  /// Coefficient tensors shaped (Ht, Wt, Ct, kh, kw, C).
  [[nodiscard]] const Tensor& a_upper() const { return a_upper_; }
  [[nodiscard]] const Tensor& a_lower() const { return a_lower_; }
  /// Offsets shaped like the target layer.
  [[nodiscard]] const Tensor& b_upper() const { return b_upper_; }
  [[nodiscard]] const Tensor& b_lower() const { return b_lower_; }

  [[nodiscard]] std::span<const double> kernel_upper(std::size_t target) const;
  [[nodiscard]] std::span<const double> kernel_lower(std::size_t target) const;

  /// Source-layer row/column of tap (i, j) for target neuron `target`; may be
  /// negative or past the edge.
  [[nodiscard]] std::ptrdiff_t source_row(std::size_t target, std::size_t i) const;
  [[nodiscard]] std::ptrdiff_t source_col(std::size_t target, std::size_t j) const;

  /// Evaluates both affine forms at a concrete source-layer value.
  [[nodiscard]] IntervalBounds evaluate(const Tensor& source) const;

  /// Dense (targets x source-size) view of the upper/lower coefficients.
  [[nodiscard]] std::vector<double> dense_upper() const;
  [[nodiscard]] std::vector<double> dense_lower() const;

 private:
  friend class MapBuilder;
  LinearBoundMap() = default;

  Shape3 target_;
  Shape3 source_;
  MapGeometry geom_;
  LayerRef source_ref_;
  Tensor a_upper_, a_lower_, b_upper_, b_lower_;
};

/// conv with activation: out = conv(act(in)). Composes the map with the
/// convolution and then absorbs the activation relaxation (if any). `relax`
/// must cover the convolution input pre-activation; pass nullptr for
/// Activation::None.
LinearBoundMap backprop_act_conv(const LinearBoundMap& map, const ConvLayer& conv, const Shape3& input_shape,
                                 const Relaxation* relax, LayerRef source);

/// Pure linear composition with a convolution.
LinearBoundMap backprop_conv(const LinearBoundMap& map, const ConvLayer& conv, const Shape3& input_shape,
                             LayerRef source);

/// Map over act(z) -> map over z, routing positive coefficients through the
/// upper relaxation for the upper map (lower for negative), and vice versa.
LinearBoundMap absorb_relaxation(const LinearBoundMap& map, const Relaxation& relax);

LinearBoundMap backprop_batchnorm(const LinearBoundMap& map, const BatchNormBlock& bn, LayerRef source);

/// Residual block out = second(act(first(in))) + in. `relax` covers the
/// first-convolution output.
LinearBoundMap backprop_residual(const LinearBoundMap& map, const ResidualBlock& block, const Relaxation* relax,
                                 LayerRef source);

/// Planes for every (output location, channel) of a max-pool layer, given the
/// bounds of its (activated) input.
struct PoolPlaneField {
  PoolBlock pool;
  Shape3 input_shape;
  Shape3 output_shape;
  std::vector<PoolPlanes> planes;  // indexed like the output layer; coefficients over window taps
};

PoolPlaneField maxpool_plane_field(const PoolBlock& pool, const IntervalBounds& input);

LinearBoundMap backprop_maxpool(const LinearBoundMap& map, const PoolPlaneField& field, LayerRef source);
LinearBoundMap backprop_avgpool(const LinearBoundMap& map, const PoolBlock& pool, const Shape3& input_shape,
                                LayerRef source);

/// Global bounds of each target neuron over the l_p ball of radius eps
/// around x0, via the dual norm of each kernel.
IntervalBounds concretize(const LinearBoundMap& map, const Tensor& x0, double eps, NormOrder p);

}  // namespace cnncert
