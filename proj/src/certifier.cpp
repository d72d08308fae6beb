#include "cnncert/certifier.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <type_traits>
#include <variant>

namespace cnncert {

namespace {

const IntervalBounds& require_bounds(const NetworkBounds& bounds, const LayerRef& layer) {
  const IntervalBounds* b = bounds.find(layer);
  if (b == nullptr) throw Error("no intermediate bounds for layer " + to_string(layer));
  return *b;
}

std::optional<Relaxation> relax_at(const NetworkBounds& bounds, const LayerRef& layer, Activation act,
                                   ReluRelaxation relu) {
  if (act == Activation::None) return std::nullopt;
  const IntervalBounds& b = require_bounds(bounds, layer);
  return relax_activation(act, relu, b.lower, b.upper);
}

LinearBoundMap absorb_optional(LinearBoundMap map, const std::optional<Relaxation>& relax) {
  return relax ? absorb_relaxation(map, *relax) : map;
}

// Map over the output of block `b` (1-based) -> map over its input.
LinearBoundMap backprop_block(const NetworkSpec& net, std::size_t b, const LinearBoundMap& map,
                              const NetworkBounds& bounds, ReluRelaxation relu) {
  const BlockSpec& block = net.blocks[b - 1];
  const LayerRef below{b - 1, false};
  return std::visit(
      [&](const auto& op) -> LinearBoundMap {
        using Op = std::decay_t<decltype(op)>;
        if constexpr (std::is_same_v<Op, ConvBlock>) {
          const auto relax = relax_at(bounds, below, block.activation, relu);
          return backprop_act_conv(map, op.conv, block.input_shape, relax ? &*relax : nullptr, below);
        } else if constexpr (std::is_same_v<Op, BatchNormBlock>) {
          return absorb_optional(backprop_batchnorm(map, op, below), relax_at(bounds, below, block.activation, relu));
        } else if constexpr (std::is_same_v<Op, ResidualBlock>) {
          const auto relax = relax_at(bounds, LayerRef{b, true}, block.activation, relu);
          return backprop_residual(map, op, relax ? &*relax : nullptr, below);
        } else {
          const auto relax = relax_at(bounds, below, block.activation, relu);
          if (op.kind == PoolKind::Average) {
            return absorb_optional(backprop_avgpool(map, op, block.input_shape, below), relax);
          }
          // The max-pool planes are built over the activated input range.
          const IntervalBounds& in = require_bounds(bounds, below);
          const IntervalBounds activated{apply_activation(block.activation, in.lower),
                                         apply_activation(block.activation, in.upper)};
          return absorb_optional(backprop_maxpool(map, maxpool_plane_field(op, activated), below), relax);
        }
      },
      block.op);
}

void check_input(const NetworkSpec& net, const Tensor& x0) {
  if (x0.shape() != net.input_shape.to_shape()) {
    throw Error("input has shape " + to_string(x0.shape()) + ", network expects " + to_string(net.input_shape));
  }
}

}  // namespace

const IntervalBounds* NetworkBounds::find(const LayerRef& layer) const {
  for (const SiteBounds& s : sites) {
    if (s.layer == layer) return &s.bounds;
  }
  return nullptr;
}

std::vector<LayerRef> relaxation_sites(const NetworkSpec& net) {
  std::vector<LayerRef> sites;
  for (std::size_t b = 1; b <= net.blocks.size(); ++b) {
    const BlockSpec& block = net.blocks[b - 1];
    if (block.is_residual()) {
      if (block.activation != Activation::None) sites.push_back({b, true});
    } else if (block.activation != Activation::None || block.is_maxpool()) {
      sites.push_back({b - 1, false});
    }
  }
  return sites;
}

LinearBoundMap propagate_to_input(const NetworkSpec& net, const LinearBoundMap& seed, const NetworkBounds& bounds,
                                  ReluRelaxation relu) {
  LayerRef at = seed.source_layer();
  if (at.block > net.blocks.size()) throw Error("propagate_to_input: no layer " + to_string(at));
  if (seed.source_shape() != layer_shape(net, at)) {
    throw Error("propagate_to_input: map source shape " + to_string(seed.source_shape()) + " does not match layer " +
                to_string(at));
  }
  LinearBoundMap map = seed;
  if (at.inner) {
    const BlockSpec& block = net.blocks[at.block - 1];
    const auto* res = std::get_if<ResidualBlock>(&block.op);
    if (res == nullptr) throw Error("propagate_to_input: block " + std::to_string(at.block) + " is not residual");
    map = backprop_conv(map, res->first, block.input_shape, LayerRef{at.block - 1, false});
    at = {at.block - 1, false};
  }
  for (std::size_t b = at.block; b >= 1; --b) {
    try {
      map = backprop_block(net, b, map, bounds, relu);
    } catch (const Error& e) {
      throw Error("block " + std::to_string(b) + " (" + net.blocks[b - 1].kind_name() + "): " + e.what());
    }
  }
  return map;
}

LinearBoundMap bound_map_for(const NetworkSpec& net, const LayerRef& target, const NetworkBounds& bounds,
                             ReluRelaxation relu) {
  return propagate_to_input(net, LinearBoundMap::identity(layer_shape(net, target), target), bounds, relu);
}

NetworkBounds intermediate_bounds(const NetworkSpec& net, const Tensor& x0, double eps, NormOrder p,
                                  ReluRelaxation relu) {
  check_input(net, x0);
  NetworkBounds result;
  for (const LayerRef& site : relaxation_sites(net)) {
    const LinearBoundMap map = bound_map_for(net, site, result, relu);
    result.sites.push_back({site, concretize(map, x0, eps, p)});
  }
  return result;
}

IntervalBounds output_bounds(const NetworkSpec& net, const Tensor& x0, double eps, NormOrder p,
                             ReluRelaxation relu) {
  const NetworkBounds sites = intermediate_bounds(net, x0, eps, p, relu);
  return concretize(bound_map_for(net, LayerRef{net.blocks.size(), false}, sites, relu), x0, eps, p);
}

MarginForm parse_margin_form(const std::string& text) {
  if (text == "difference") return MarginForm::Difference;
  if (text == "separate") return MarginForm::Separate;
  throw Error("unknown margin form '" + text + "'; expected difference or separate");
}

std::string to_string(MarginForm form) { return form == MarginForm::Difference ? "difference" : "separate"; }

void CertifyOptions::validate() const {
  if (!(eps_init > 0) || !std::isfinite(eps_init)) throw Error("eps_init must be positive and finite");
  if (!(growth > 1) || !std::isfinite(growth)) throw Error("growth must exceed 1");
  if (!(rel_tol > 0) || !(rel_tol < 1)) throw Error("rel_tol must lie in (0, 1)");
  if (max_iters < 1) throw Error("max_iters must be at least 1");
  if (!(max_eps >= eps_init) || !std::isfinite(max_eps)) throw Error("max_eps must be finite and at least eps_init");
}

std::vector<double> margin_lower_bounds(const NetworkSpec& net, const Tensor& x0, double eps, NormOrder p,
                                        std::size_t c, ReluRelaxation relu, MarginForm form) {
  const std::size_t k = net.num_classes();
  if (c >= k) throw Error("class " + std::to_string(c) + " out of range for " + std::to_string(k) + " classes");
  std::vector<double> margins(k, std::numeric_limits<double>::infinity());
  const LayerRef logits{net.blocks.size(), false};
  const NetworkBounds sites = intermediate_bounds(net, x0, eps, p, relu);

  if (form == MarginForm::Separate) {
    const IntervalBounds out = concretize(bound_map_for(net, logits, sites, relu), x0, eps, p);
    for (std::size_t t = 0; t < k; ++t) {
      if (t != c) margins[t] = out.lower[c] - out.upper[t];
    }
    return margins;
  }

  std::vector<double> rows(k * k, 0.0);
  for (std::size_t t = 0; t < k; ++t) {
    if (t == c) continue;
    rows[t * k + c] = 1.0;
    rows[t * k + t] = -1.0;
  }
  const LinearBoundMap seed = LinearBoundMap::linear_forms(layer_shape(net, logits), rows, k, logits);
  const IntervalBounds diff = concretize(propagate_to_input(net, seed, sites, relu), x0, eps, p);
  for (std::size_t t = 0; t < k; ++t) {
    if (t != c) margins[t] = diff.lower[t];
  }
  return margins;
}

MarginResult certify_margin(const NetworkSpec& net, const Tensor& x0, double eps, NormOrder p, std::size_t c,
                            std::size_t t, const CertifyOptions& options) {
  const std::size_t k = net.num_classes();
  if (t >= k) throw Error("target class " + std::to_string(t) + " out of range for " + std::to_string(k) + " classes");
  if (t == c) throw Error("target class equals the certified class " + std::to_string(c));
  const double m = margin_lower_bounds(net, x0, eps, p, c, options.relu, options.margin)[t];
  return {m, m > 0};
}

CertificationResult search_radius(const MarginOracle& oracle, std::size_t predicted,
                                  const std::vector<std::size_t>& targets, const CertifyOptions& options) {
  options.validate();
  if (targets.empty()) throw Error("search_radius: no target classes");

  CertificationResult result;
  result.predicted = predicted;
  std::map<double, std::vector<double>> cache;
  auto margins_at = [&](double eps) -> const std::vector<double>& {
    if (auto it = cache.find(eps); it != cache.end()) {
      ++result.cache_hits;
      return it->second;
    }
    ++result.bound_evaluations;
    return cache.emplace(eps, oracle(eps)).first->second;
  };

  bool first = true;
  for (std::size_t t : targets) {
    if (t == predicted) throw Error("search_radius: target equals the predicted class");
    int steps = 0;
    auto holds = [&](double eps) {
      const std::vector<double>& m = margins_at(eps);
      if (t >= m.size()) throw Error("search_radius: oracle returned too few margins");
      const bool ok = m[t] > 0;  // NaN never certifies
      result.trace.push_back({eps, t, m[t], ok});
      ++steps;
      return ok;
    };

    double lo = 0.0;
    double hi = options.eps_init;
    bool bracketed = true;
    if (holds(options.eps_init)) {
      lo = options.eps_init;
      bracketed = false;
      while (lo < options.max_eps) {
        const double next = std::min(lo * options.growth, options.max_eps);
        if (!holds(next)) {
          hi = next;
          bracketed = true;
          break;
        }
        lo = next;
      }
    }
    if (bracketed) {
      for (int it = 0; it < options.max_iters && hi - lo > options.rel_tol * hi; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (holds(mid)) lo = mid;
        else hi = mid;
      }
    }

    if (first || lo < result.radius) {
      result.radius = lo;
      result.binding_target = t;
      result.iterations = steps;
      first = false;
    }
  }
  result.never_certified = result.radius == 0.0;
  result.reached_max_eps = result.radius >= options.max_eps;
  return result;
}

CertificationResult certified_radius(const NetworkSpec& net, const Tensor& x0, NormOrder p,
                                     std::optional<std::size_t> target, const CertifyOptions& options) {
  check_input(net, x0);
  const std::size_t c = predicted_class(forward(net, x0));
  const std::size_t k = net.num_classes();
  std::vector<std::size_t> targets;
  if (target) {
    if (*target >= k) {
      throw Error("target class " + std::to_string(*target) + " out of range for " + std::to_string(k) + " classes");
    }
    if (*target == c) throw Error("target class " + std::to_string(*target) + " is the predicted class");
    targets.push_back(*target);
  } else {
    for (std::size_t t = 0; t < k; ++t) {
      if (t != c) targets.push_back(t);
    }
  }
  const MarginOracle oracle = [&](double eps) {
    return margin_lower_bounds(net, x0, eps, p, c, options.relu, options.margin);
  };
  CertificationResult result = search_radius(oracle, c, targets, options);
  result.norm = p;
  result.target = target;
  return result;
}

}  // namespace cnncert
