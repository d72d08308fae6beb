#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "cnncert/model.hpp"
#include "cnncert/tensor.hpp"

#ifndef CNNCERT_FIXTURE_DIR
#define CNNCERT_FIXTURE_DIR "fixtures"
#endif

namespace testing {

inline std::string fixture(const std::string& name) { return std::string(CNNCERT_FIXTURE_DIR) + "/" + name; }

inline cnncert::Tensor tensor3(std::size_t h, std::size_t w, std::size_t c, std::vector<double> v) {
  return cnncert::Tensor(cnncert::Shape{h, w, c}, std::move(v));
}

inline cnncert::Tensor scalar_input(double v) { return tensor3(1, 1, 1, {v}); }

inline cnncert::ConvLayer conv_layer(std::size_t kh, std::size_t kw, std::size_t cin, std::size_t cout,
                                     std::vector<double> weights, std::vector<double> bias, std::size_t stride = 1,
                                     std::size_t pad = 0) {
  cnncert::ConvLayer c;
  c.geom = cnncert::ConvGeometry{{kh, kw}, {stride, stride}, {pad, pad}, cin, cout};
  c.weights = cnncert::Tensor(cnncert::Shape{kh, kw, cin, cout}, std::move(weights));
  c.bias = cnncert::Tensor(cnncert::Shape{cout}, std::move(bias));
  return c;
}

inline cnncert::BlockSpec conv_block(cnncert::Activation act, cnncert::ConvLayer layer) {
  return cnncert::BlockSpec{act, cnncert::ConvBlock{std::move(layer)}, {}, {}};
}

inline cnncert::NetworkSpec network(cnncert::Shape3 input, std::vector<cnncert::BlockSpec> blocks) {
  cnncert::NetworkSpec net{input, std::move(blocks)};
  cnncert::finalize_network(net);
  return net;
}

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

inline double max_abs_diff(const cnncert::Tensor& a, const cnncert::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testing
