#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cnncert/bound_map.hpp"
#include "cnncert/model.hpp"
#include "cnncert/relaxation.hpp"
#include "cnncert/tensor.hpp"

namespace cnncert {

/// Bounds of one relaxation site, i.e. a layer whose activation (or max-pool)
/// needs an interval before it can be linearized.
struct SiteBounds {
  LayerRef layer;
  IntervalBounds bounds;
};

struct NetworkBounds {
  std::vector<SiteBounds> sites;  // front to back

  [[nodiscard]] const IntervalBounds* find(const LayerRef& layer) const;
};

/// Layers whose bounds the backward pass needs, front to back: inputs of blocks
/// with a nonlinear activation or a max-pool, and residual inner layers with
/// an activation.
std::vector<LayerRef> relaxation_sites(const NetworkSpec& net);

/// Pulls `seed` (a map over some layer) back to the network input, relaxing
/// activations with the supplied site bounds.
LinearBoundMap propagate_to_input(const NetworkSpec& net, const LinearBoundMap& seed, const NetworkBounds& bounds,
                                  ReluRelaxation relu);

/// Map of `target` in terms of the input.
LinearBoundMap bound_map_for(const NetworkSpec& net, const LayerRef& target, const NetworkBounds& bounds,
                             ReluRelaxation relu);

/// Site bounds over the l_p ball of radius eps around x0, computed front to back.
NetworkBounds intermediate_bounds(const NetworkSpec& net, const Tensor& x0, double eps, NormOrder p,
                                  ReluRelaxation relu);

/// Bounds of every logit.
IntervalBounds output_bounds(const NetworkSpec& net, const Tensor& x0, double eps, NormOrder p,
                             ReluRelaxation relu);

/// How a margin between class c and target t is bounded.
///  - Difference: lower bound of logit_c - logit_t from one backward pass.
///  - Separate: lower bound of logit_c minus upper bound of logit_t.
enum class MarginForm { Difference, Separate };

MarginForm parse_margin_form(const std::string& text);
std::string to_string(MarginForm form);

struct CertifyOptions {
  ReluRelaxation relu = ReluRelaxation::Adaptive;
  MarginForm margin = MarginForm::Difference;
  double eps_init = 0.005;
  double growth = 2.0;
  double rel_tol = 1e-3;
  int max_iters = 30;
  double max_eps = 10.0;

  void validate() const;
};

/// Lower bounds on logit_c - logit_t for every class t (entry c is +inf).
std::vector<double> margin_lower_bounds(const NetworkSpec& net, const Tensor& x0, double eps, NormOrder p,
                                        std::size_t c, ReluRelaxation relu, MarginForm form);

struct MarginResult {
  double margin = 0.0;
  bool certified = false;
};

MarginResult certify_margin(const NetworkSpec& net, const Tensor& x0, double eps, NormOrder p, std::size_t c,
                            std::size_t t, const CertifyOptions& options = {});

/// One evaluation of the certification condition during the search.
struct Probe {
  double eps = 0.0;
  std::size_t target = 0;
  double margin = 0.0;
  bool certified = false;
};

struct CertificationResult {
  double radius = 0.0;
  NormOrder norm = NormOrder::Linf;
  std::optional<std::size_t> target;  // nullopt: untargeted
  std::size_t predicted = 0;
  std::size_t binding_target = 0;     // class that determines the radius
  int iterations = 0;                 // search steps of the binding target
  std::size_t bound_evaluations = 0;  // distinct eps values evaluated
  std::size_t cache_hits = 0;
  bool never_certified = false;
  bool reached_max_eps = false;
  std::vector<Probe> trace;
};

/// eps -> lower bounds on logit_c - logit_t for every class t.
using MarginOracle = std::function<std::vector<double>(double eps)>;

/// Largest eps (within rel_tol) for which every target margin stays positive.
/// Targets share one eps-keyed cache of oracle results.
CertificationResult search_radius(const MarginOracle& oracle, std::size_t predicted,
                                  const std::vector<std::size_t>& targets, const CertifyOptions& options);

/// Certified radius around x0. `target` nullopt certifies against every other
/// class and returns the smallest radius.
CertificationResult certified_radius(const NetworkSpec& net, const Tensor& x0, NormOrder p,
                                     std::optional<std::size_t> target, const CertifyOptions& options = {});

}  // namespace cnncert
