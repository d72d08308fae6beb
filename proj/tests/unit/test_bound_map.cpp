#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"

#include "cnncert/bound_map.hpp"
#include "cnncert/certifier.hpp"
#include "cnncert/fixtures.hpp"

using namespace cnncert;

namespace {

const Shape3 kScalar{1, 1, 1};

IntervalBounds interval(std::vector<double> l, std::vector<double> u, Shape3 shape) {
  return {Tensor(shape.to_shape(), std::move(l)), Tensor(shape.to_shape(), std::move(u))};
}

Relaxation fastlin_scalar(double l, double u) {
  return relax_relu_fastlin(Tensor(Shape{1, 1, 1}, l), Tensor(Shape{1, 1, 1}, u));
}

// Jacobian of a network without activations, one column per input basis vector.
std::vector<double> linear_jacobian(const NetworkSpec& net) {
  const std::size_t n = net.input_shape.size(), m = net.num_classes();
  const Tensor zero(net.input_shape.to_shape(), 0.0);
  const Tensor base = forward(net, zero);
  std::vector<double> jac(m * n);
  for (std::size_t j = 0; j < n; ++j) {
    Tensor e = zero;
    e[j] = 1.0;
    const Tensor y = forward(net, e);
    for (std::size_t i = 0; i < m; ++i) jac[i * n + j] = y[i] - base[i];
  }
  return jac;
}

}  // namespace

TEST_CASE("identity map") {
  const Shape3 s{3, 2, 2};
  const auto map = LinearBoundMap::identity(s);
  CHECK(map.target_shape() == s);
  CHECK(map.source_shape() == s);
  CHECK(map.geometry().kernel == Extent2{1, 1});
  const auto dense = map.dense_upper();
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) CHECK(dense[i * s.size() + j] == (i == j ? 1.0 : 0.0));
  CHECK(map.b_upper().values() == std::vector<double>(s.size(), 0.0));
}

TEST_CASE("activation then convolution on a scalar") {
  SUBCASE("positive weight") {
    const ConvLayer conv = testing::conv_layer(1, 1, 1, 1, {2}, {0.5});
    const Relaxation r = fastlin_scalar(-1, 1);
    const auto m = backprop_act_conv(LinearBoundMap::identity(kScalar), conv, kScalar, &r, {});
    CHECK(m.kernel_upper(0)[0] == doctest::Approx(1.0));
    CHECK(m.b_upper()[0] == doctest::Approx(1.5));
    CHECK(m.kernel_lower(0)[0] == doctest::Approx(1.0));
    CHECK(m.b_lower()[0] == doctest::Approx(0.5));
  }
  SUBCASE("negative weight swaps the relaxation sides") {
    const ConvLayer conv = testing::conv_layer(1, 1, 1, 1, {-2}, {0.5});
    const Relaxation r = fastlin_scalar(-1, 1);
    const auto m = backprop_act_conv(LinearBoundMap::identity(kScalar), conv, kScalar, &r, {});
    CHECK(m.kernel_upper(0)[0] == doctest::Approx(-1.0));
    CHECK(m.b_upper()[0] == doctest::Approx(0.5));
    CHECK(m.kernel_lower(0)[0] == doctest::Approx(-1.0));
    CHECK(m.b_lower()[0] == doctest::Approx(-0.5));
  }
  SUBCASE("no activation composes exactly") {
    const ConvLayer conv = testing::conv_layer(1, 1, 1, 1, {-3}, {0.25});
    const auto m = backprop_act_conv(LinearBoundMap::identity(kScalar), conv, kScalar, nullptr, {});
    CHECK(m.kernel_upper(0)[0] == -3.0);
    CHECK(m.kernel_lower(0)[0] == -3.0);
    CHECK(m.b_upper()[0] == 0.25);
    CHECK(m.b_lower()[0] == 0.25);
  }
}

TEST_CASE("batchnorm folds into scale and shift") {
  for (double gamma : {2.0, -2.0}) {
    const BatchNormBlock bn{{gamma}, {1.0}, {0.5}, {3.0}, 1.0};
    const auto m = backprop_batchnorm(LinearBoundMap::identity(kScalar), bn, {});
    const double scale = gamma / 2.0, shift = 1.0 - 0.5 * scale;
    CHECK(m.kernel_upper(0)[0] == doctest::Approx(scale));
    CHECK(m.kernel_lower(0)[0] == doctest::Approx(scale));
    CHECK(m.b_upper()[0] == doctest::Approx(shift));
    CHECK(m.b_lower()[0] == doctest::Approx(shift));
  }
}

TEST_CASE("batchnorm with negative scale keeps random maps sound") {
  std::mt19937_64 rng(8);
  const Shape3 s{2, 2, 2};
  const BatchNormBlock bn{{-1.5, 0.7}, {0.2, -0.1}, {0.3, 0.0}, {2.0, 0.5}, 1e-3};
  std::vector<double> rows = testing::random_values(3 * s.size(), rng);
  const auto m = backprop_batchnorm(LinearBoundMap::linear_forms(s, rows, 3, {}), bn, {});
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x(s.to_shape(), testing::random_values(s.size(), rng));
    const BlockSpec block{Activation::None, bn, s, s};
    const Tensor y = forward_block(block, x);
    const IntervalBounds b = m.evaluate(x);
    for (std::size_t r = 0; r < 3; ++r) {
      double exact = 0;
      for (std::size_t i = 0; i < s.size(); ++i) exact += rows[r * s.size() + i] * y[i];
      CHECK(b.upper[r] == doctest::Approx(exact).epsilon(1e-12));
      CHECK(b.lower[r] == doctest::Approx(exact).epsilon(1e-12));
    }
  }
}

TEST_CASE("residual block on a scalar") {
  const ResidualBlock res{testing::conv_layer(1, 1, 1, 1, {1}, {0}), testing::conv_layer(1, 1, 1, 1, {1}, {0})};
  const Relaxation r = fastlin_scalar(-1, 1);
  const auto m = backprop_residual(LinearBoundMap::identity(kScalar), res, &r, {});
  CHECK(m.kernel_upper(0)[0] == doctest::Approx(1.5));
  CHECK(m.b_upper()[0] == doctest::Approx(0.5));
  CHECK(m.kernel_lower(0)[0] == doctest::Approx(1.5));
  CHECK(m.b_lower()[0] == doctest::Approx(0.0));
  // Without an activation the block is x + second(first(x)).
  const auto lin = backprop_residual(LinearBoundMap::identity(kScalar), res, nullptr, {});
  CHECK(lin.kernel_upper(0)[0] == doctest::Approx(2.0));
}

TEST_CASE("max-pool maps") {
  SUBCASE("1x1 window leaves the map unchanged") {
    const Shape3 s{2, 2, 1};
    const PoolBlock pool{PoolKind::Max, {1, 1}, {1, 1}, {0, 0}};
    const auto field = maxpool_plane_field(pool, interval({0, 0, 0, 0}, {1, 2, 3, 4}, s));
    const auto m = backprop_maxpool(LinearBoundMap::identity(s), field, {});
    CHECK(m.dense_upper() == LinearBoundMap::identity(s).dense_upper());
    CHECK(m.dense_lower() == LinearBoundMap::identity(s).dense_lower());
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(m.b_upper()[i] == doctest::Approx(0.0));
      CHECK(m.b_lower()[i] == doctest::Approx(0.0));
    }
  }
  SUBCASE("one window over unit intervals") {
    const Shape3 s{1, 2, 1};
    const PoolBlock pool{PoolKind::Max, {1, 2}, {1, 2}, {0, 0}};
    const auto field = maxpool_plane_field(pool, interval({0, 0}, {1, 1}, s));
    const auto m = backprop_maxpool(LinearBoundMap::identity(Shape3{1, 1, 1}), field, {});
    CHECK(m.dense_upper() == std::vector<double>{0.5, 0.5});
    CHECK(m.dense_lower() == std::vector<double>{0.5, 0.5});
    CHECK(m.b_upper()[0] == doctest::Approx(0.5));
    CHECK(m.b_lower()[0] == doctest::Approx(0.0));
  }
  SUBCASE("negative coefficients take the opposite plane") {
    const Shape3 s{1, 2, 1};
    const PoolBlock pool{PoolKind::Max, {1, 2}, {1, 2}, {0, 0}};
    const auto field = maxpool_plane_field(pool, interval({0, 0}, {1, 1}, s));
    const std::vector<double> row{-2.0};
    const auto m = backprop_maxpool(LinearBoundMap::linear_forms(Shape3{1, 1, 1}, row, 1, {1, false}), field, {});
    CHECK(m.dense_upper() == std::vector<double>{-1.0, -1.0});
    CHECK(m.b_upper()[0] == doctest::Approx(0.0));
    CHECK(m.b_lower()[0] == doctest::Approx(-1.0));
  }
}

TEST_CASE("average-pool map spreads coefficients over the window") {
  const Shape3 s{2, 2, 1};
  const PoolBlock pool{PoolKind::Average, {2, 2}, {2, 2}, {0, 0}};
  const auto m = backprop_avgpool(LinearBoundMap::identity(Shape3{1, 1, 1}), pool, s, {});
  CHECK(m.dense_upper() == std::vector<double>(4, 0.25));
  CHECK(m.dense_lower() == std::vector<double>(4, 0.25));
}

TEST_CASE("concretize over norm balls") {
  const auto id = LinearBoundMap::identity(kScalar);
  const IntervalBounds b = concretize(id, testing::scalar_input(0.7), 0.1, NormOrder::Linf);
  CHECK(b.lower[0] == doctest::Approx(0.6));
  CHECK(b.upper[0] == doctest::Approx(0.8));

  const Shape3 pair{1, 1, 2};
  const std::vector<double> row{1.0, 1.0};
  const auto sum = LinearBoundMap::linear_forms(pair, row, 1, {});
  const Tensor zero(pair.to_shape(), 0.0);
  const IntervalBounds inf = concretize(sum, zero, 0.1, NormOrder::Linf);
  CHECK(inf.upper[0] == doctest::Approx(0.2));
  CHECK(inf.lower[0] == doctest::Approx(-0.2));
  const IntervalBounds two = concretize(sum, zero, 0.1, NormOrder::L2);
  CHECK(two.upper[0] == doctest::Approx(0.1 * std::sqrt(2.0)));
  CHECK(two.lower[0] == doctest::Approx(-0.1 * std::sqrt(2.0)));
  const IntervalBounds one = concretize(sum, zero, 0.1, NormOrder::L1);
  CHECK(one.upper[0] == doctest::Approx(0.1));

  CHECK_THROWS_AS(concretize(sum, zero, -1.0, NormOrder::L2), Error);
  CHECK_THROWS_AS(concretize(LinearBoundMap::identity(kScalar, {1, false}), testing::scalar_input(0), 0.1,
                             NormOrder::L2),
                  Error);
}

TEST_CASE("linear_forms validates its row count") {
  const std::vector<double> rows{1.0, 2.0, 3.0};
  CHECK_THROWS_AS(LinearBoundMap::linear_forms(Shape3{1, 1, 2}, rows, 2, {}), Error);
}

TEST_CASE("maps of networks without activations equal their Jacobian") {
  for (const Fixture& f : linear_suite(12, 11)) {
    CAPTURE(f.name);
    const LayerRef out{f.net.blocks.size(), false};
    const auto map = bound_map_for(f.net, out, NetworkBounds{}, ReluRelaxation::Adaptive);
    const auto jac = linear_jacobian(f.net);
    const auto up = map.dense_upper(), lo = map.dense_lower();
    REQUIRE(up.size() == jac.size());
    for (std::size_t i = 0; i < jac.size(); ++i) {
      CHECK(std::abs(up[i] - jac[i]) < 1e-12);
      CHECK(std::abs(lo[i] - jac[i]) < 1e-12);
    }
    const Tensor x = random_input(f.net.input_shape, 3);
    const Tensor y = forward(f.net, x);
    const IntervalBounds b = map.evaluate(x);
    for (std::size_t i = 0; i < y.size(); ++i) {
      CHECK(std::abs(b.upper[i] - y[i]) < 1e-12);
      CHECK(std::abs(b.lower[i] - y[i]) < 1e-12);
    }
  }
}

TEST_CASE("composition is associative for stacked convolutions") {
  std::mt19937_64 rng(12);
  const Shape3 in{7, 7, 2};
  const ConvLayer c1 = testing::conv_layer(3, 3, 2, 3, testing::random_values(54, rng), testing::random_values(3, rng), 2, 1);
  const Shape3 mid = c1.geom.output_shape(in);
  const ConvLayer c2 = testing::conv_layer(2, 2, 3, 2, testing::random_values(24, rng), testing::random_values(2, rng), 1, 1);
  const Shape3 out = c2.geom.output_shape(mid);
  // Stepwise: identity over out, back through c2 then c1.
  const auto step = backprop_conv(backprop_conv(LinearBoundMap::identity(out), c2, mid, {1, false}), c1, in, {});
  // Grouped: c2 applied to an already-composed linear form over mid.
  const auto over_mid = backprop_conv(LinearBoundMap::identity(out), c2, mid, {1, false});
  const auto rows = over_mid.dense_upper();
  const auto grouped = backprop_conv(LinearBoundMap::linear_forms(mid, rows, out.size(), {1, false}), c1, in, {});
  const auto a = step.dense_upper(), b = grouped.dense_upper();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
  // linear_forms carries no offset, so the second convolution's contribution is added back.
  for (std::size_t t = 0; t < out.size(); ++t) {
    CHECK(std::abs(step.b_upper()[t] - (grouped.b_upper()[t] + over_mid.b_upper()[t])) < 1e-12);
  }
}

TEST_CASE("Fast-Lin maps share upper and lower coefficients") {
  for (const Fixture& f : relu_suite(12, 7)) {
    if (f.net.has_maxpool()) continue;
    CAPTURE(f.name);
    const Tensor x0 = random_input(f.net.input_shape, 5);
    const NetworkBounds nb = intermediate_bounds(f.net, x0, 0.05, NormOrder::Linf, ReluRelaxation::FastLin);
    const auto map = bound_map_for(f.net, LayerRef{f.net.blocks.size(), false}, nb, ReluRelaxation::FastLin);
    const auto up = map.dense_upper(), lo = map.dense_lower();
    for (std::size_t i = 0; i < up.size(); ++i) CHECK(std::abs(up[i] - lo[i]) < 1e-12);
  }
}
