#include "cnncert/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace cnncert {

using nlohmann::json;

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

[[noreturn]] void fail(const std::string& path, const std::string& what) { throw Error(path + ": " + what); }

const json& require(const json& obj, const char* key, const std::string& path) {
  auto it = obj.find(key);
  if (it == obj.end()) fail(path, std::string("missing field '") + key + "'");
  return *it;
}

std::vector<double> read_doubles(const json& v, const std::string& path) {
  if (!v.is_array()) fail(path, "expected an array of numbers");
  std::vector<double> out;
  out.reserve(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) fail(path + "[" + std::to_string(i) + "]", "expected a number");
    const double d = v[i].get<double>();
    if (!std::isfinite(d)) fail(path + "[" + std::to_string(i) + "]", "value is not finite");
    out.push_back(d);
  }
  return out;
}

std::vector<std::size_t> read_extents(const json& v, std::size_t n, const std::string& path) {
  if (!v.is_array() || v.size() != n) fail(path, "expected an array of " + std::to_string(n) + " integers");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (!v[i].is_number_integer() || v[i].get<long long>() < 0) {
      fail(path + "[" + std::to_string(i) + "]", "expected a non-negative integer");
    }
    out.push_back(v[i].get<std::size_t>());
  }
  return out;
}

Extent2 read_pair(const json& obj, const char* key, Extent2 fallback, const std::string& path) {
  auto it = obj.find(key);
  if (it == obj.end()) return fallback;
  auto e = read_extents(*it, 2, path + "." + key);
  return {e[0], e[1]};
}

Tensor read_tensor(const json& obj, const char* key, const Shape& shape, const std::string& path) {
  auto values = read_doubles(require(obj, key, path), path + "." + key);
  if (values.size() != shape_product(shape)) {
    fail(path + "." + key, "expected " + std::to_string(shape_product(shape)) + " values for shape " +
                               to_string(shape) + ", got " + std::to_string(values.size()));
  }
  return Tensor(shape, std::move(values));
}

ConvLayer read_conv(const json& obj, const std::string& path) {
  auto ks = read_extents(require(obj, "kernel_shape", path), 4, path + ".kernel_shape");
  ConvLayer layer;
  layer.geom.kernel = {ks[0], ks[1]};
  layer.geom.in_channels = ks[2];
  layer.geom.out_channels = ks[3];
  layer.geom.stride = read_pair(obj, "stride", {1, 1}, path);
  layer.geom.padding = read_pair(obj, "padding", {0, 0}, path);
  if (layer.geom.stride.h == 0 || layer.geom.stride.w == 0) fail(path + ".stride", "strides must be >= 1");
  layer.weights = read_tensor(obj, "weights", {ks[0], ks[1], ks[2], ks[3]}, path);
  layer.bias = read_tensor(obj, "bias", {ks[3]}, path);
  return layer;
}

json write_pair(Extent2 e) { return json::array({e.h, e.w}); }

json write_conv(const ConvLayer& layer) {
  json j;
  j["kernel_shape"] = {layer.geom.kernel.h, layer.geom.kernel.w, layer.geom.in_channels, layer.geom.out_channels};
  j["stride"] = write_pair(layer.geom.stride);
  j["padding"] = write_pair(layer.geom.padding);
  j["weights"] = layer.weights.values();
  j["bias"] = layer.bias.values();
  return j;
}

std::string block_label(const NetworkSpec& net, std::size_t i) {
  return "blocks[" + std::to_string(i) + "] (" + net.blocks[i].kind_name() + ")";
}

Shape3 checked_conv_output(const ConvLayer& layer, const Shape3& in, const std::string& where) {
  try {
    layer.geom.validate(in);
    return layer.geom.output_shape(in);
  } catch (const Error& e) {
    throw Error(where + ": " + e.what());
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

InputRecord parse_input(const json& j, const std::string& path) {
  if (!j.is_object()) fail(path, "expected an input object");
  auto shape = read_extents(require(j, "shape", path), 3, path + ".shape");
  InputRecord rec{read_tensor(j, "data", {shape[0], shape[1], shape[2]}, path), std::nullopt};
  if (auto it = j.find("label"); it != j.end() && !it->is_null()) {
    if (!it->is_number_integer()) fail(path + ".label", "expected an integer");
    rec.label = it->get<long>();
  }
  return rec;
}

}  // namespace

Activation parse_activation(const std::string& text) {
  if (text == "none" || text == "linear") return Activation::None;
  if (text == "relu") return Activation::Relu;
  if (text == "sigmoid") return Activation::Sigmoid;
  if (text == "tanh") return Activation::Tanh;
  if (text == "arctan") return Activation::Arctan;
  throw Error("unknown activation '" + text + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::None: return "none";
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Tanh: return "tanh";
    case Activation::Arctan: return "arctan";
  }
  return "?";
}

double activate(Activation a, double y) {
  switch (a) {
    case Activation::None: return y;
    case Activation::Relu: return y > 0 ? y : 0.0;
    case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-y));
    case Activation::Tanh: return std::tanh(y);
    case Activation::Arctan: return std::atan(y);
  }
  return y;
}

double activate_derivative(Activation a, double y) {
  switch (a) {
    case Activation::None: return 1.0;
    case Activation::Relu: return y > 0 ? 1.0 : 0.0;
    case Activation::Sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-y));
      return s * (1.0 - s);
    }
    case Activation::Tanh: {
      const double t = std::tanh(y);
      return 1.0 - t * t;
    }
    case Activation::Arctan: return 1.0 / (1.0 + y * y);
  }
  return 1.0;
}

double BatchNormBlock::scale(std::size_t c) const { return gamma[c] / std::sqrt(variance[c] + epsilon); }

double BatchNormBlock::shift(std::size_t c) const { return beta[c] - gamma[c] * mean[c] / std::sqrt(variance[c] + epsilon); }

std::string BlockSpec::kind_name() const {
  return std::visit(overloaded{[](const ConvBlock&) { return std::string("conv"); },
                               [](const ResidualBlock&) { return std::string("residual"); },
                               [](const BatchNormBlock&) { return std::string("batchnorm"); },
                               [](const PoolBlock& p) {
                                 return std::string(p.kind == PoolKind::Max ? "maxpool" : "avgpool");
                               }},
                    op);
}

bool BlockSpec::is_maxpool() const {
  const auto* p = std::get_if<PoolBlock>(&op);
  return p && p->kind == PoolKind::Max;
}

bool NetworkSpec::has_maxpool() const {
  return std::any_of(blocks.begin(), blocks.end(), [](const BlockSpec& b) { return b.is_maxpool(); });
}

void finalize_network(NetworkSpec& net) {
  if (net.input_shape.size() == 0) throw Error("input_shape: all extents must be >= 1");
  if (net.blocks.empty()) throw Error("blocks: network has no blocks");
  Shape3 current = net.input_shape;
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    auto& block = net.blocks[i];
    const std::string where = block_label(net, i);
    if (i > 0) {
      const std::size_t expected = std::visit(
          overloaded{[](const ConvBlock& b) { return b.conv.geom.in_channels; },
                     [](const ResidualBlock& b) { return b.first.geom.in_channels; },
                     [&](const BatchNormBlock& b) { return b.gamma.size(); },
                     [&](const PoolBlock&) { return current.c; }},
          block.op);
      if (expected != current.c) {
        throw Error(where + " expects " + std::to_string(expected) + " input channels but " +
                    block_label(net, i - 1) + " produces shape " + to_string(current));
      }
    }
    block.input_shape = current;
    block.output_shape = std::visit(
        overloaded{
            [&](const ConvBlock& b) { return checked_conv_output(b.conv, current, where); },
            [&](const ResidualBlock& b) {
              for (const ConvLayer* layer : {&b.first, &b.second}) {
                if (layer->geom.stride != Extent2{1, 1}) throw Error(where + ": residual convolutions need stride 1");
              }
              Shape3 mid = checked_conv_output(b.first, current, where + " first conv");
              Shape3 out = checked_conv_output(b.second, mid, where + " second conv");
              if (mid.h != current.h || mid.w != current.w || out != current) {
                throw Error(where + ": residual branch maps " + to_string(current) + " to " + to_string(out) +
                            " but must preserve the input shape");
              }
              return out;
            },
            [&](const BatchNormBlock& b) {
              const std::size_t c = current.c;
              if (b.beta.size() != c || b.mean.size() != c || b.variance.size() != c || b.gamma.size() != c) {
                throw Error(where + ": batchnorm parameter lengths must equal channel count " + std::to_string(c));
              }
              if (!(b.epsilon > 0) || !std::isfinite(b.epsilon)) throw Error(where + ".epsilon: must be > 0");
              for (double v : b.variance) {
                if (v < 0) throw Error(where + ".variance: must be >= 0");
              }
              return current;
            },
            [&](const PoolBlock& p) {
              if (p.window.h == 0 || p.window.w == 0) throw Error(where + ".pool_size: must be >= 1");
              if (p.padding.h >= p.window.h || p.padding.w >= p.window.w) {
                throw Error(where + ".padding: must be smaller than the pooling window");
              }
              try {
                return Shape3{conv_output_extent(current.h, p.window.h, p.stride.h, p.padding.h, "height"),
                              conv_output_extent(current.w, p.window.w, p.stride.w, p.padding.w, "width"), current.c};
              } catch (const Error& e) {
                throw Error(where + ": " + e.what());
              }
            }},
        block.op);
    current = block.output_shape;
  }
}

NetworkSpec load_model_string(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("malformed model JSON: ") + e.what());
  }
  if (!root.is_object()) throw Error("model: expected a JSON object");
  NetworkSpec net;
  auto in = read_extents(require(root, "input_shape", "model"), 3, "input_shape");
  net.input_shape = {in[0], in[1], in[2]};
  const json& blocks = require(root, "blocks", "model");
  if (!blocks.is_array()) fail("blocks", "expected an array");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string path = "blocks[" + std::to_string(i) + "]";
    const json& b = blocks[i];
    if (!b.is_object()) fail(path, "expected an object");
    const json& kind_json = require(b, "kind", path);
    if (!kind_json.is_string()) fail(path + ".kind", "expected a string");
    const std::string kind = kind_json.get<std::string>();
    BlockSpec block;
    if (auto it = b.find("activation"); it != b.end()) {
      if (!it->is_string()) fail(path + ".activation", "expected a string");
      try {
        block.activation = parse_activation(it->get<std::string>());
      } catch (const Error& e) {
        fail(path + ".activation", e.what());
      }
    }
    if (kind == "conv" || kind == "dense") {
      block.op = ConvBlock{read_conv(b, path)};
    } else if (kind == "residual") {
      const json& convs = require(b, "convs", path);
      if (!convs.is_array() || convs.size() != 2) fail(path + ".convs", "residual blocks carry exactly two convolutions");
      block.op = ResidualBlock{read_conv(convs[0], path + ".convs[0]"), read_conv(convs[1], path + ".convs[1]")};
    } else if (kind == "batchnorm") {
      BatchNormBlock bn;
      bn.gamma = read_doubles(require(b, "gamma", path), path + ".gamma");
      bn.beta = read_doubles(require(b, "beta", path), path + ".beta");
      bn.mean = read_doubles(require(b, "mean", path), path + ".mean");
      bn.variance = read_doubles(require(b, "variance", path), path + ".variance");
      const json& eps = require(b, "epsilon", path);
      if (!eps.is_number()) fail(path + ".epsilon", "expected a number");
      bn.epsilon = eps.get<double>();
      if (!(bn.epsilon > 0)) fail(path + ".epsilon", "must be > 0");
      block.op = std::move(bn);
    } else if (kind == "maxpool" || kind == "avgpool") {
      PoolBlock p;
      p.kind = kind == "maxpool" ? PoolKind::Max : PoolKind::Average;
      p.window = read_pair(b, "pool_size", {2, 2}, path);
      p.stride = read_pair(b, "stride", p.window, path);
      p.padding = read_pair(b, "padding", {0, 0}, path);
      block.op = p;
    } else {
      fail(path + ".kind", "unknown block kind '" + kind + "'");
    }
    net.blocks.push_back(std::move(block));
  }
  finalize_network(net);
  return net;
}

NetworkSpec load_model(std::istream& source) {
  std::ostringstream ss;
  ss << source.rdbuf();
  return load_model_string(ss.str());
}

NetworkSpec load_model_file(const std::string& path) { return load_model_string(read_file(path)); }

std::string save_model(const NetworkSpec& net) {
  json root;
  root["input_shape"] = {net.input_shape.h, net.input_shape.w, net.input_shape.c};
  json blocks = json::array();
  for (const auto& block : net.blocks) {
    json b;
    b["kind"] = block.kind_name();
    b["activation"] = to_string(block.activation);
    std::visit(overloaded{[&](const ConvBlock& c) { b.update(write_conv(c.conv)); },
                          [&](const ResidualBlock& r) { b["convs"] = {write_conv(r.first), write_conv(r.second)}; },
                          [&](const BatchNormBlock& bn) {
                            b["gamma"] = bn.gamma;
                            b["beta"] = bn.beta;
                            b["mean"] = bn.mean;
                            b["variance"] = bn.variance;
                            b["epsilon"] = bn.epsilon;
                          },
                          [&](const PoolBlock& p) {
                            b["pool_size"] = write_pair(p.window);
                            b["stride"] = write_pair(p.stride);
                            b["padding"] = write_pair(p.padding);
                          }},
               block.op);
    blocks.push_back(std::move(b));
  }
  root["blocks"] = std::move(blocks);
  return root.dump();
}

std::vector<InputRecord> load_inputs_string(const std::string& text) {
  std::vector<InputRecord> out;
  try {
    json root = json::parse(text);
    if (root.is_array()) {
      for (std::size_t i = 0; i < root.size(); ++i) out.push_back(parse_input(root[i], "inputs[" + std::to_string(i) + "]"));
    } else {
      out.push_back(parse_input(root, "input"));
    }
    return out;
  } catch (const json::exception&) {
    // fall through to JSON lines
  }
  std::istringstream lines(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error("inputs line " + std::to_string(n + 1) + ": malformed JSON: " + e.what());
    }
    out.push_back(parse_input(j, "inputs[" + std::to_string(n) + "]"));
    ++n;
  }
  if (out.empty()) throw Error("inputs: no input records found");
  return out;
}

std::vector<InputRecord> load_inputs_file(const std::string& path) { return load_inputs_string(read_file(path)); }

std::string save_input(const Tensor& x, std::optional<long> label) {
  json j;
  j["shape"] = x.shape();
  j["data"] = x.values();
  if (label) j["label"] = *label;
  return j.dump();
}

std::string to_string(const LayerRef& ref) {
  if (ref.block == 0) return "input";
  return "block " + std::to_string(ref.block) + (ref.inner ? " (residual inner)" : "");
}

Shape3 layer_shape(const NetworkSpec& net, const LayerRef& ref) {
  if (ref.block == 0) return net.input_shape;
  if (ref.block > net.blocks.size()) throw Error("layer index " + std::to_string(ref.block) + " out of range");
  const auto& block = net.blocks[ref.block - 1];
  if (ref.inner) {
    const auto* res = std::get_if<ResidualBlock>(&block.op);
    if (!res) throw Error(to_string(ref) + " is not a residual block");
    return res->first.geom.output_shape(block.input_shape);
  }
  return block.output_shape;
}

const Tensor& ForwardTrace::at(const LayerRef& ref) const {
  if (ref.inner) {
    if (ref.block >= inner.size() || !inner[ref.block]) throw Error(to_string(ref) + " has no inner value");
    return *inner[ref.block];
  }
  return outputs.at(ref.block);
}

Tensor apply_activation(Activation a, const Tensor& t) {
  if (a == Activation::None) return t;
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = activate(a, t[i]);
  return out;
}

namespace {

Tensor pool_forward(const PoolBlock& p, const Tensor& in, const Shape3& out_shape) {
  const Shape3 s = in.shape3();
  Tensor out(out_shape);
  for (std::size_t y = 0; y < out_shape.h; ++y) {
    for (std::size_t x = 0; x < out_shape.w; ++x) {
      for (std::size_t k = 0; k < s.c; ++k) {
        double best = -std::numeric_limits<double>::infinity();
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t i = 0; i < p.window.h; ++i) {
          const auto iy = static_cast<std::ptrdiff_t>(y * p.stride.h + i) - static_cast<std::ptrdiff_t>(p.padding.h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(s.h)) continue;
          for (std::size_t j = 0; j < p.window.w; ++j) {
            const auto ix = static_cast<std::ptrdiff_t>(x * p.stride.w + j) - static_cast<std::ptrdiff_t>(p.padding.w);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(s.w)) continue;
            const double v = in.at(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), k);
            best = std::max(best, v);
            sum += v;
            ++count;
          }
        }
        out.at(y, x, k) = p.kind == PoolKind::Max ? best : sum / static_cast<double>(count);
      }
    }
  }
  return out;
}

}  // namespace

Tensor forward_block(const BlockSpec& block, const Tensor& input, Tensor* inner) {
  if (input.shape3() != block.input_shape) {
    throw Error("block input shape " + to_string(input.shape()) + " does not match expected " +
                to_string(block.input_shape));
  }
  return std::visit(
      overloaded{[&](const ConvBlock& b) {
                   return conv2d(apply_activation(block.activation, input), b.conv.weights, b.conv.bias, b.conv.geom);
                 },
                 [&](const ResidualBlock& b) {
                   Tensor h = conv2d(input, b.first.weights, b.first.bias, b.first.geom);
                   Tensor out = conv2d(apply_activation(block.activation, h), b.second.weights, b.second.bias, b.second.geom);
                   for (std::size_t i = 0; i < out.size(); ++i) out[i] += input[i];
                   if (inner) *inner = std::move(h);
                   return out;
                 },
                 [&](const BatchNormBlock& b) {
                   Tensor out = apply_activation(block.activation, input);
                   const std::size_t c = block.input_shape.c;
                   for (std::size_t i = 0; i < out.size(); ++i) out[i] = b.scale(i % c) * out[i] + b.shift(i % c);
                   return out;
                 },
                 [&](const PoolBlock& p) {
                   return pool_forward(p, apply_activation(block.activation, input), block.output_shape);
                 }},
      block.op);
}

ForwardTrace forward_trace(const NetworkSpec& net, const Tensor& x) {
  if (x.rank() != 3 || x.shape3() != net.input_shape) {
    throw Error("input shape " + to_string(x.shape()) + " does not match model input_shape " +
                to_string(net.input_shape));
  }
  ForwardTrace trace;
  trace.outputs.reserve(net.blocks.size() + 1);
  trace.inner.resize(net.blocks.size() + 1);
  trace.outputs.push_back(x);
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    Tensor inner;
    trace.outputs.push_back(forward_block(net.blocks[b], trace.outputs.back(), &inner));
    if (net.blocks[b].is_residual()) trace.inner[b + 1] = std::move(inner);
  }
  return trace;
}

Tensor forward(const NetworkSpec& net, const Tensor& x) {
  if (x.rank() != 3 || x.shape3() != net.input_shape) {
    throw Error("input shape " + to_string(x.shape()) + " does not match model input_shape " +
                to_string(net.input_shape));
  }
  Tensor current = x;
  for (const auto& block : net.blocks) current = forward_block(block, current);
  return current;
}

std::size_t predicted_class(const Tensor& logits) {
  if (logits.size() < 2) throw Error("predicted_class: need at least 2 classes, got " + std::to_string(logits.size()));
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

}  // namespace cnncert
