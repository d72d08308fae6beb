#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cnncert/model.hpp"
#include "cnncert/tensor.hpp"

namespace cnncert {

/// Architectures of the randomly generated test networks.
enum class FixtureFamily { Plain, MaxPool, BatchNorm, Residual, AvgPool, Strided };

std::string to_string(FixtureFamily family);

struct Fixture {
  std::string name;
  FixtureFamily family = FixtureFamily::Plain;
  Activation activation = Activation::Relu;
  NetworkSpec net;
};

/// 2 to 4 blocks, at most 5 filters, ending in a whole-input convolution that
/// produces `classes` logits. Weights are N(0, 1/sqrt(fan_in)).
NetworkSpec random_network(FixtureFamily family, Activation activation, std::uint64_t seed,
                           Shape3 input = {8, 8, 1}, std::size_t classes = 3);

/// Deterministic suite cycling through every family and nonlinear activation.
std::vector<Fixture> fixture_suite(std::size_t count = 30, std::uint64_t seed = 2019);

/// ReLU-only networks of every family.
std::vector<Fixture> relu_suite(std::size_t count = 20, std::uint64_t seed = 7);

/// Networks without any activation (and without max-pool).
std::vector<Fixture> linear_suite(std::size_t count = 12, std::uint64_t seed = 11);

/// 28x28x1 input, 4 blocks of 5 filters, 10 logits, ReLU.
NetworkSpec benchmark_network(std::uint64_t seed = 1);

/// Entries uniform in [0, 1].
Tensor random_input(const Shape3& shape, std::uint64_t seed);

bool is_relu_only(const NetworkSpec& net);

}  // namespace cnncert
