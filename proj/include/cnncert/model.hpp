#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "cnncert/tensor.hpp"

namespace cnncert {

enum class Activation { None, Relu, Sigmoid, Tanh, Arctan };

Activation parse_activation(const std::string& text);
std::string to_string(Activation a);

double activate(Activation a, double y);
/// First derivative of the activation (ReLU: 1 for y > 0, else 0).
double activate_derivative(Activation a, double y);

struct ConvLayer {
  ConvGeometry geom;
  Tensor weights;  // (kh, kw, cin, cout)
  Tensor bias;     // (cout)

  [[nodiscard]] double weight(std::size_t i, std::size_t j, std::size_t cin, std::size_t cout) const {
    return weights[((i * geom.kernel.w + j) * geom.in_channels + cin) * geom.out_channels + cout];
  }
};

struct ConvBlock {
  ConvLayer conv;
};

/// out = second(act(first(in))) + in. The block activation is the inner one.
struct ResidualBlock {
  ConvLayer first;
  ConvLayer second;
};

struct BatchNormBlock {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> mean;
  std::vector<double> variance;
  double epsilon = 1e-5;

  [[nodiscard]] double scale(std::size_t c) const;
  [[nodiscard]] double shift(std::size_t c) const;
};

enum class PoolKind { Max, Average };

/// Padded window positions are excluded: max and mean are taken over the
/// in-range entries only.
struct PoolBlock {
  PoolKind kind = PoolKind::Max;
  Extent2 window{2, 2};
  Extent2 stride{2, 2};
  Extent2 padding{0, 0};
};

using BlockOp = std::variant<ConvBlock, ResidualBlock, BatchNormBlock, PoolBlock>;

/// One building block. Except for residual blocks the activation is applied
/// to the block input before the block operation: out = op(act(in)).
struct BlockSpec {
  Activation activation = Activation::None;
  BlockOp op;
  Shape3 input_shape;
  Shape3 output_shape;

  [[nodiscard]] std::string kind_name() const;
  [[nodiscard]] bool is_residual() const { return std::holds_alternative<ResidualBlock>(op); }
  [[nodiscard]] bool is_maxpool() const;
};

/// Ordered list of blocks; the output of the last block is the logit vector.
struct NetworkSpec {
  Shape3 input_shape;
  std::vector<BlockSpec> blocks;

  [[nodiscard]] Shape3 output_shape() const {
    return blocks.empty() ? input_shape : blocks.back().output_shape;
  }
  [[nodiscard]] std::size_t num_classes() const { return output_shape().size(); }
  [[nodiscard]] bool has_maxpool() const;
};

/// Checks the shape chain, parameter shapes and finiteness, and fills the
/// per-block input/output shapes. Throws Error naming the offending block.
void finalize_network(NetworkSpec& net);

NetworkSpec load_model(std::istream& source);
NetworkSpec load_model_string(const std::string& json);
NetworkSpec load_model_file(const std::string& path);
std::string save_model(const NetworkSpec& net);

struct InputRecord {
  Tensor x;
  std::optional<long> label;
};

/// Accepts a single input object, an array of them, or one object per line.
std::vector<InputRecord> load_inputs_string(const std::string& text);
std::vector<InputRecord> load_inputs_file(const std::string& path);
std::string save_input(const Tensor& x, std::optional<long> label = std::nullopt);

/// Identifies a layer of the network: `block == 0` is the input, otherwise the
/// output of block `block` (1-based). `inner` selects the pre-activation after
/// the first convolution of a residual block.
struct LayerRef {
  std::size_t block = 0;
  bool inner = false;

  friend bool operator==(const LayerRef&, const LayerRef&) = default;
};

std::string to_string(const LayerRef& ref);
Shape3 layer_shape(const NetworkSpec& net, const LayerRef& ref);

/// Every intermediate value of one forward pass.
struct ForwardTrace {
  std::vector<Tensor> outputs;               // outputs[0] = x, outputs[b] = block b output
  std::vector<std::optional<Tensor>> inner;  // residual first-conv outputs, indexed like outputs

  [[nodiscard]] const Tensor& at(const LayerRef& ref) const;
};

Tensor apply_activation(Activation a, const Tensor& t);
Tensor forward_block(const BlockSpec& block, const Tensor& input, Tensor* inner = nullptr);
ForwardTrace forward_trace(const NetworkSpec& net, const Tensor& x);
Tensor forward(const NetworkSpec& net, const Tensor& x);

/// argmax with ties broken towards the lowest index.
std::size_t predicted_class(const Tensor& logits);

}  // namespace cnncert
