#include "cnncert/fixtures.hpp"

#include <array>
#include <cmath>
#include <random>

namespace cnncert {

namespace {

class NetBuilder {
 public:
  NetBuilder(Shape3 input, std::mt19937_64& rng) : rng_(rng), shape_(input) { net_.input_shape = input; }

  void conv(Activation act, std::size_t kernel, std::size_t stride, std::size_t pad, std::size_t filters) {
    conv(act, Extent2{kernel, kernel}, stride, pad, filters);
  }

  void dense(Activation act, std::size_t outputs) { conv(act, Extent2{shape_.h, shape_.w}, 1, 0, outputs); }

  void pool(Activation act, PoolKind kind, std::size_t window, std::size_t stride, std::size_t pad) {
    PoolBlock p{kind, {window, window}, {stride, stride}, {pad, pad}};
    shape_ = Shape3{conv_output_extent(shape_.h, window, stride, pad, "height"),
                    conv_output_extent(shape_.w, window, stride, pad, "width"), shape_.c};
    net_.blocks.push_back(BlockSpec{act, p, {}, {}});
  }

  void batchnorm(Activation act) {
    BatchNormBlock bn;
    std::uniform_real_distribution<double> scale(0.5, 1.5), var(0.5, 2.0);
    std::normal_distribution<double> small(0.0, 0.2);
    for (std::size_t c = 0; c < shape_.c; ++c) {
      bn.gamma.push_back((rng_() % 4 == 0 ? -1.0 : 1.0) * scale(rng_));
      bn.beta.push_back(small(rng_));
      bn.mean.push_back(small(rng_));
      bn.variance.push_back(var(rng_));
    }
    bn.epsilon = 1e-3;
    net_.blocks.push_back(BlockSpec{act, bn, {}, {}});
  }

  void residual(Activation act, std::size_t inner_filters) {
    ResidualBlock r{layer(Extent2{3, 3}, 1, 1, shape_.c, inner_filters), layer(Extent2{3, 3}, 1, 1, inner_filters, shape_.c)};
    net_.blocks.push_back(BlockSpec{act, r, {}, {}});
  }

  NetworkSpec finish() {
    finalize_network(net_);
    return net_;
  }

 private:
  void conv(Activation act, Extent2 kernel, std::size_t stride, std::size_t pad, std::size_t filters) {
    ConvLayer c = layer(kernel, stride, pad, shape_.c, filters);
    shape_ = c.geom.output_shape(shape_);
    net_.blocks.push_back(BlockSpec{act, ConvBlock{std::move(c)}, {}, {}});
  }

  ConvLayer layer(Extent2 kernel, std::size_t stride, std::size_t pad, std::size_t cin, std::size_t cout) {
    ConvLayer c;
    c.geom = ConvGeometry{kernel, {stride, stride}, {pad, pad}, cin, cout};
    const double fan_in = static_cast<double>(kernel.h * kernel.w * cin);
    std::normal_distribution<double> w(0.0, 1.0 / std::sqrt(fan_in)), b(0.0, 0.1);
    std::vector<double> weights(kernel.h * kernel.w * cin * cout);
    for (double& v : weights) v = w(rng_);
    std::vector<double> bias(cout);
    for (double& v : bias) v = b(rng_);
    c.weights = Tensor(Shape{kernel.h, kernel.w, cin, cout}, std::move(weights));
    c.bias = Tensor(Shape{cout}, std::move(bias));
    return c;
  }

  std::mt19937_64& rng_;
  NetworkSpec net_;
  Shape3 shape_;
};

constexpr std::array kFamilies{FixtureFamily::Plain,    FixtureFamily::MaxPool, FixtureFamily::BatchNorm,
                               FixtureFamily::Residual, FixtureFamily::AvgPool, FixtureFamily::Strided};
constexpr std::array kNonlinear{Activation::Relu, Activation::Sigmoid, Activation::Tanh, Activation::Arctan};

std::string fixture_name(FixtureFamily family, Activation act, std::size_t index) {
  return to_string(family) + "-" + to_string(act) + "-" + std::to_string(index);
}

}  // namespace

std::string to_string(FixtureFamily family) {
  switch (family) {
    case FixtureFamily::Plain: return "plain";
    case FixtureFamily::MaxPool: return "maxpool";
    case FixtureFamily::BatchNorm: return "batchnorm";
    case FixtureFamily::Residual: return "residual";
    case FixtureFamily::AvgPool: return "avgpool";
    case FixtureFamily::Strided: return "strided";
  }
  return "unknown";
}

NetworkSpec random_network(FixtureFamily family, Activation act, std::uint64_t seed, Shape3 input,
                           std::size_t classes) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) { return lo + static_cast<std::size_t>(rng() % (hi - lo + 1)); };
  NetBuilder nb(input, rng);
  const bool extra = rng() % 2 == 1;
  const std::size_t filters = pick(2, 5);
  switch (family) {
    case FixtureFamily::Plain: {
      nb.conv(Activation::None, 3, 1, pick(0, 1), filters);
      const std::size_t hidden = pick(0, 2);
      for (std::size_t i = 0; i < hidden; ++i) nb.conv(act, 3, 1, pick(0, 1), pick(2, 5));
      break;
    }
    case FixtureFamily::MaxPool:
      nb.conv(Activation::None, 3, 1, 1, filters);
      if (rng() % 2 == 0) nb.pool(act, PoolKind::Max, 2, 2, 0);
      else nb.pool(act, PoolKind::Max, 3, 2, 1);
      if (extra) nb.conv(Activation::None, 3, 1, 1, pick(2, 5));
      break;
    case FixtureFamily::BatchNorm:
      nb.conv(Activation::None, 3, 1, pick(0, 1), filters);
      nb.batchnorm(act);
      if (extra) nb.conv(act, 3, 1, 0, pick(2, 5));
      break;
    case FixtureFamily::Residual:
      nb.conv(Activation::None, 3, 1, 1, filters);
      nb.residual(act, pick(2, 5));
      if (extra) nb.residual(act, pick(2, 5));
      break;
    case FixtureFamily::AvgPool:
      nb.conv(Activation::None, 3, 1, 1, filters);
      nb.pool(act, PoolKind::Average, 2, 2, 0);
      if (extra) nb.conv(act, 2, 1, 0, pick(2, 5));
      break;
    case FixtureFamily::Strided:
      nb.conv(Activation::None, 3, 2, 1, filters);
      if (extra) nb.conv(act, 2, 1, 0, pick(2, 5));
      break;
  }
  // A max-pool output is already activated; the plain path needs at least one
  // nonlinearity before the logits either way.
  nb.dense(family == FixtureFamily::MaxPool && !extra ? Activation::None : act, classes);
  return nb.finish();
}

std::vector<Fixture> fixture_suite(std::size_t count, std::uint64_t seed) {
  std::vector<Fixture> out;
  for (std::size_t i = 0; i < count; ++i) {
    const FixtureFamily family = kFamilies[i % kFamilies.size()];
    const Activation act = kNonlinear[(i + i / kFamilies.size()) % kNonlinear.size()];
    out.push_back({fixture_name(family, act, i), family, act, random_network(family, act, seed * 1000 + i)});
  }
  return out;
}

std::vector<Fixture> relu_suite(std::size_t count, std::uint64_t seed) {
  std::vector<Fixture> out;
  for (std::size_t i = 0; i < count; ++i) {
    const FixtureFamily family = kFamilies[i % kFamilies.size()];
    out.push_back({fixture_name(family, Activation::Relu, i), family, Activation::Relu,
                   random_network(family, Activation::Relu, seed * 1000 + i)});
  }
  return out;
}

std::vector<Fixture> linear_suite(std::size_t count, std::uint64_t seed) {
  std::vector<Fixture> out;
  for (std::size_t i = 0; i < count; ++i) {
    FixtureFamily family = kFamilies[i % kFamilies.size()];
    if (family == FixtureFamily::MaxPool) family = FixtureFamily::Plain;
    out.push_back({fixture_name(family, Activation::None, i), family, Activation::None,
                   random_network(family, Activation::None, seed * 1000 + i)});
  }
  return out;
}

NetworkSpec benchmark_network(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  NetBuilder nb(Shape3{28, 28, 1}, rng);
  nb.conv(Activation::None, 3, 1, 0, 5);
  nb.conv(Activation::Relu, 3, 1, 0, 5);
  nb.conv(Activation::Relu, 3, 1, 0, 5);
  nb.dense(Activation::Relu, 10);
  return nb.finish();
}

Tensor random_input(const Shape3& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> values(shape.size());
  for (double& v : values) v = unit(rng);
  return Tensor(shape.to_shape(), std::move(values));
}

bool is_relu_only(const NetworkSpec& net) {
  for (const BlockSpec& b : net.blocks) {
    if (b.activation != Activation::None && b.activation != Activation::Relu) return false;
  }
  return true;
}

}  // namespace cnncert
