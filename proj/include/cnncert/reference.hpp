#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "cnncert/bound_map.hpp"
#include "cnncert/certifier.hpp"
#include "cnncert/model.hpp"
#include "cnncert/relaxation.hpp"
#include "cnncert/tensor.hpp"

namespace cnncert {

/// z_out = weight * act(z_in) + bias, with one activation per input neuron.
struct DenseLayer {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;
  std::vector<Activation> activation;
};

/// A network unrolled into explicit matrices over flattened (HWC) layers.
struct DenseNetwork {
  std::size_t input_size = 0;
  std::vector<DenseLayer> layers;

  [[nodiscard]] std::size_t output_size() const {
    return layers.empty() ? input_size : static_cast<std::size_t>(layers.back().bias.size());
  }
  [[nodiscard]] Eigen::VectorXd forward(const Eigen::VectorXd& x) const;
};

/// Throws on max-pool blocks. A residual block becomes two layers that carry
/// the block input alongside the inner branch.
DenseNetwork to_dense(const NetworkSpec& net);

Eigen::VectorXd flatten(const Tensor& t);

/// Layer-by-layer backward substitution with the shared relaxation rules.
/// `rows` (if given) are linear forms over the output; the default bounds the
/// outputs themselves.
IntervalBounds dense_bounds(const DenseNetwork& net, const Tensor& x0, double eps, NormOrder p, ReluRelaxation relu,
                            const Eigen::MatrixXd* rows = nullptr);

std::vector<double> dense_margin_lower_bounds(const DenseNetwork& net, const Tensor& x0, double eps, NormOrder p,
                                              std::size_t c, ReluRelaxation relu, MarginForm form);

CertificationResult dense_certified_radius(const DenseNetwork& net, const Tensor& x0, NormOrder p,
                                           std::optional<std::size_t> target, const CertifyOptions& options = {});

/// Uniform-ish point of the l_p ball of radius eps (see sample_attack for the
/// per-norm scheme). `on_boundary` forces a point of the sphere.
Tensor sample_perturbation(const Shape& shape, NormOrder p, double eps, bool on_boundary, std::mt19937_64& rng);

struct AttackResult {
  std::optional<Tensor> delta;  // first class-flipping perturbation found
  std::size_t predicted = 0;
  std::size_t adversarial_class = 0;
  double best_margin = 0.0;  // smallest (logit_c - max other) seen
  std::size_t evaluations = 0;

  [[nodiscard]] bool found() const { return delta.has_value(); }
};

/// Random search over the ball followed by coordinate-greedy refinement of the
/// best candidate.
AttackResult sample_attack(const NetworkSpec& net, const Tensor& x0, NormOrder p, double eps, std::size_t budget,
                           std::uint64_t seed);

/// Smallest eps on a geometric grid up to `max_eps` at which sample_attack
/// flips the class, refined by bisection; nullopt if no flip is found.
std::optional<double> attack_upper_bound(const NetworkSpec& net, const Tensor& x0, NormOrder p, std::size_t budget,
                                         std::uint64_t seed, double max_eps = 10.0);

struct SandwichReport {
  LayerRef layer;
  std::size_t samples = 0;
  double max_violation = 0.0;
};

/// Samples the ball and measures how far the true layer values fall outside
/// the propagated linear bounds.
SandwichReport sandwich_check(const NetworkSpec& net, const LayerRef& layer, const Tensor& x0, double eps,
                              NormOrder p, std::size_t samples, std::uint64_t seed,
                              ReluRelaxation relu = ReluRelaxation::Adaptive);

/// sandwich_check on every relaxation site and the output layer.
std::vector<SandwichReport> sandwich_check_all(const NetworkSpec& net, const Tensor& x0, double eps, NormOrder p,
                                               std::size_t samples, std::uint64_t seed,
                                               ReluRelaxation relu = ReluRelaxation::Adaptive);

}  // namespace cnncert
