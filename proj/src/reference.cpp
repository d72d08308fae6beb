#include "cnncert/reference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <type_traits>
#include <variant>

namespace cnncert {

namespace {

Eigen::MatrixXd conv_matrix(const ConvLayer& conv, const Shape3& in, const Shape3& out) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(out.size()), static_cast<Eigen::Index>(in.size()));
  const ConvGeometry& g = conv.geom;
  for (std::size_t y = 0; y < out.h; ++y) {
    for (std::size_t x = 0; x < out.w; ++x) {
      for (std::size_t i = 0; i < g.kernel.h; ++i) {
        const auto r = static_cast<std::ptrdiff_t>(y * g.stride.h + i) - static_cast<std::ptrdiff_t>(g.padding.h);
        if (r < 0 || r >= static_cast<std::ptrdiff_t>(in.h)) continue;
        for (std::size_t j = 0; j < g.kernel.w; ++j) {
          const auto c = static_cast<std::ptrdiff_t>(x * g.stride.w + j) - static_cast<std::ptrdiff_t>(g.padding.w);
          if (c < 0 || c >= static_cast<std::ptrdiff_t>(in.w)) continue;
          for (std::size_t k = 0; k < g.in_channels; ++k) {
            const auto col = static_cast<Eigen::Index>(in.index(static_cast<std::size_t>(r), static_cast<std::size_t>(c), k));
            for (std::size_t z = 0; z < g.out_channels; ++z) {
              m(static_cast<Eigen::Index>(out.index(y, x, z)), col) += conv.weight(i, j, k, z);
            }
          }
        }
      }
    }
  }
  return m;
}

Eigen::VectorXd conv_bias(const ConvLayer& conv, const Shape3& out) {
  Eigen::VectorXd b(static_cast<Eigen::Index>(out.size()));
  for (std::size_t n = 0; n < out.size(); ++n) b(static_cast<Eigen::Index>(n)) = conv.bias[n % out.c];
  return b;
}

Eigen::VectorXd row_norms(const Eigen::MatrixXd& m, NormOrder q) {
  switch (q) {
    case NormOrder::L1: return m.rowwise().lpNorm<1>();
    case NormOrder::L2: return m.rowwise().norm();
    default: return m.rowwise().lpNorm<Eigen::Infinity>();
  }
}

double logit_margin(const Tensor& logits, std::size_t c) {
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < logits.size(); ++t) {
    if (t != c) best = std::max(best, logits[t]);
  }
  return logits[c] - best;
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor r = a;
  for (std::size_t i = 0; i < r.size(); ++i) r[i] += b[i];
  return r;
}

}  // namespace

Eigen::VectorXd DenseNetwork::forward(const Eigen::VectorXd& x) const {
  if (static_cast<std::size_t>(x.size()) != input_size) {
    throw Error("dense forward: input has " + std::to_string(x.size()) + " entries, expected " +
                std::to_string(input_size));
  }
  Eigen::VectorXd z = x;
  for (const DenseLayer& layer : layers) {
    Eigen::VectorXd a(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) a(i) = activate(layer.activation[static_cast<std::size_t>(i)], z(i));
    z = layer.weight * a + layer.bias;
  }
  return z;
}

Eigen::VectorXd flatten(const Tensor& t) {
  return Eigen::Map<const Eigen::VectorXd>(t.data().data(), static_cast<Eigen::Index>(t.size()));
}

DenseNetwork to_dense(const NetworkSpec& net) {
  DenseNetwork dnet;
  dnet.input_size = net.input_shape.size();
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    const BlockSpec& block = net.blocks[b];
    const Shape3& in = block.input_shape;
    const Shape3& out = block.output_shape;
    const auto n_in = static_cast<Eigen::Index>(in.size());
    const auto n_out = static_cast<Eigen::Index>(out.size());
    const std::vector<Activation> acts(in.size(), block.activation);
    std::visit(
        [&](const auto& op) {
          using Op = std::decay_t<decltype(op)>;
          if constexpr (std::is_same_v<Op, ConvBlock>) {
            dnet.layers.push_back({conv_matrix(op.conv, in, out), conv_bias(op.conv, out), acts});
          } else if constexpr (std::is_same_v<Op, BatchNormBlock>) {
            DenseLayer layer{Eigen::MatrixXd::Zero(n_out, n_in), Eigen::VectorXd(n_out), acts};
            for (Eigen::Index n = 0; n < n_out; ++n) {
              const std::size_t ch = static_cast<std::size_t>(n) % in.c;
              layer.weight(n, n) = op.scale(ch);
              layer.bias(n) = op.shift(ch);
            }
            dnet.layers.push_back(std::move(layer));
          } else if constexpr (std::is_same_v<Op, ResidualBlock>) {
            const Shape3 mid = op.first.geom.output_shape(in);
            const auto n_mid = static_cast<Eigen::Index>(mid.size());
            DenseLayer expand{Eigen::MatrixXd::Zero(n_mid + n_in, n_in), Eigen::VectorXd::Zero(n_mid + n_in),
                              std::vector<Activation>(in.size(), Activation::None)};
            expand.weight.topRows(n_mid) = conv_matrix(op.first, in, mid);
            expand.weight.bottomRows(n_in).setIdentity();
            expand.bias.head(n_mid) = conv_bias(op.first, mid);
            std::vector<Activation> merge_acts(mid.size(), block.activation);
            merge_acts.resize(mid.size() + in.size(), Activation::None);
            DenseLayer merge{Eigen::MatrixXd::Zero(n_out, n_mid + n_in), conv_bias(op.second, out),
                             std::move(merge_acts)};
            merge.weight.leftCols(n_mid) = conv_matrix(op.second, mid, out);
            merge.weight.rightCols(n_in).setIdentity();
            dnet.layers.push_back(std::move(expand));
            dnet.layers.push_back(std::move(merge));
          } else {
            if (op.kind == PoolKind::Max) {
              throw Error("to_dense: block " + std::to_string(b + 1) + " is a max-pool, which has no matrix form");
            }
            DenseLayer layer{Eigen::MatrixXd::Zero(n_out, n_in), Eigen::VectorXd::Zero(n_out), acts};
            for (std::size_t y = 0; y < out.h; ++y) {
              for (std::size_t x = 0; x < out.w; ++x) {
                std::vector<std::size_t> taps;
                for (std::size_t i = 0; i < op.window.h; ++i) {
                  const auto r = static_cast<std::ptrdiff_t>(y * op.stride.h + i) -
                                 static_cast<std::ptrdiff_t>(op.padding.h);
                  if (r < 0 || r >= static_cast<std::ptrdiff_t>(in.h)) continue;
                  for (std::size_t j = 0; j < op.window.w; ++j) {
                    const auto c = static_cast<std::ptrdiff_t>(x * op.stride.w + j) -
                                   static_cast<std::ptrdiff_t>(op.padding.w);
                    if (c < 0 || c >= static_cast<std::ptrdiff_t>(in.w)) continue;
                    taps.push_back(in.index(static_cast<std::size_t>(r), static_cast<std::size_t>(c), 0));
                  }
                }
                for (std::size_t k = 0; k < in.c; ++k) {
                  for (std::size_t t : taps) {
                    layer.weight(static_cast<Eigen::Index>(out.index(y, x, k)), static_cast<Eigen::Index>(t + k)) =
                        1.0 / static_cast<double>(taps.size());
                  }
                }
              }
            }
            dnet.layers.push_back(std::move(layer));
          }
        },
        block.op);
  }
  return dnet;
}

IntervalBounds dense_bounds(const DenseNetwork& net, const Tensor& x0, double eps, NormOrder p, ReluRelaxation relu,
                            const Eigen::MatrixXd* rows) {
  if (x0.size() != net.input_size) {
    throw Error("dense_bounds: input has " + std::to_string(x0.size()) + " entries, expected " +
                std::to_string(net.input_size));
  }
  if (!(eps >= 0) || !std::isfinite(eps)) throw Error("dense_bounds: eps must be finite and >= 0");
  if (net.layers.empty()) throw Error("dense_bounds: network has no layers");
  const Eigen::VectorXd x = flatten(x0);
  const NormOrder q = dual_exponent(p);
  const std::size_t depth = net.layers.size();

  // bounds[k] covers z_k, the output of layer k (z_0 = x).
  std::vector<std::optional<std::pair<Eigen::VectorXd, Eigen::VectorXd>>> bounds(depth + 1);

  // Bounds of lam * z_k over the ball; a null lam bounds z_k itself.
  auto bound_forms = [&](std::size_t k, const Eigen::MatrixXd* lam) {
    const auto width = static_cast<Eigen::Index>(k == 0 ? net.input_size : net.layers[k - 1].bias.size());
    Eigen::MatrixXd lu, ll;
    Eigen::VectorXd bu, bl;
    if (k == 0) {
      lu = ll = lam != nullptr ? *lam : Eigen::MatrixXd::Identity(width, width);
      bu = bl = Eigen::VectorXd::Zero(lu.rows());
    } else {
      if (lam != nullptr) {
        lu = ll = *lam * net.layers[k - 1].weight;
        bu = bl = *lam * net.layers[k - 1].bias;
      } else {
        lu = ll = net.layers[k - 1].weight;
        bu = bl = net.layers[k - 1].bias;
      }
      for (std::size_t j = k - 1;; --j) {
        const DenseLayer& consumer = net.layers[j];
        const bool linear = std::all_of(consumer.activation.begin(), consumer.activation.end(),
                                        [](Activation a) { return a == Activation::None; });
        if (!linear) {
          const auto& [lo, hi] = *bounds[j];
          for (Eigen::Index i = 0; i < lu.cols(); ++i) {
            const NeuronRelaxation r =
                relax_neuron(consumer.activation[static_cast<std::size_t>(i)], relu, lo(i), hi(i));
            for (Eigen::Index row = 0; row < lu.rows(); ++row) {
              const double a = lu(row, i);
              if (a > 0) {
                bu(row) += a * r.upper.offset;
                lu(row, i) = a * r.upper.slope;
              } else {
                bu(row) += a * r.lower.offset;
                lu(row, i) = a * r.lower.slope;
              }
              const double b = ll(row, i);
              if (b > 0) {
                bl(row) += b * r.lower.offset;
                ll(row, i) = b * r.lower.slope;
              } else {
                bl(row) += b * r.upper.offset;
                ll(row, i) = b * r.upper.slope;
              }
            }
          }
        }
        if (j == 0) break;
        bu += lu * net.layers[j - 1].bias;
        bl += ll * net.layers[j - 1].bias;
        lu = lu * net.layers[j - 1].weight;
        ll = ll * net.layers[j - 1].weight;
      }
    }
    Eigen::VectorXd upper = lu * x + bu + eps * row_norms(lu, q);
    Eigen::VectorXd lower = ll * x + bl - eps * row_norms(ll, q);
    return std::make_pair(std::move(lower), std::move(upper));
  };

  for (std::size_t k = 0; k < depth; ++k) {
    const auto& acts = net.layers[k].activation;
    const bool needed = std::any_of(acts.begin(), acts.end(), [](Activation a) { return a != Activation::None; });
    if (!needed) continue;
    bounds[k] = bound_forms(k, nullptr);
  }

  const auto n_out = static_cast<Eigen::Index>(net.output_size());
  if (rows != nullptr && rows->cols() != n_out) {
    throw Error("dense_bounds: linear forms have " + std::to_string(rows->cols()) + " columns, expected " +
                std::to_string(n_out));
  }
  const auto [lower, upper] = bound_forms(depth, rows);
  const Shape shape{static_cast<std::size_t>(lower.size())};
  return {Tensor(shape, std::vector<double>(lower.data(), lower.data() + lower.size())),
          Tensor(shape, std::vector<double>(upper.data(), upper.data() + upper.size()))};
}

std::vector<double> dense_margin_lower_bounds(const DenseNetwork& net, const Tensor& x0, double eps, NormOrder p,
                                              std::size_t c, ReluRelaxation relu, MarginForm form) {
  const std::size_t k = net.output_size();
  if (c >= k) throw Error("class " + std::to_string(c) + " out of range for " + std::to_string(k) + " classes");
  std::vector<double> margins(k, std::numeric_limits<double>::infinity());
  if (form == MarginForm::Separate) {
    const IntervalBounds out = dense_bounds(net, x0, eps, p, relu);
    for (std::size_t t = 0; t < k; ++t) {
      if (t != c) margins[t] = out.lower[c] - out.upper[t];
    }
    return margins;
  }
  const auto n = static_cast<Eigen::Index>(k);
  Eigen::MatrixXd rows = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index t = 0; t < n; ++t) {
    if (static_cast<std::size_t>(t) == c) continue;
    rows(t, static_cast<Eigen::Index>(c)) = 1.0;
    rows(t, t) = -1.0;
  }
  const IntervalBounds diff = dense_bounds(net, x0, eps, p, relu, &rows);
  for (std::size_t t = 0; t < k; ++t) {
    if (t != c) margins[t] = diff.lower[t];
  }
  return margins;
}

CertificationResult dense_certified_radius(const DenseNetwork& net, const Tensor& x0, NormOrder p,
                                           std::optional<std::size_t> target, const CertifyOptions& options) {
  const Eigen::VectorXd logits = net.forward(flatten(x0));
  const std::size_t k = net.output_size();
  const std::size_t c = predicted_class(Tensor(Shape{k}, std::vector<double>(logits.data(), logits.data() + k)));
  std::vector<std::size_t> targets;
  if (target) {
    if (*target >= k || *target == c) throw Error("invalid target class " + std::to_string(*target));
    targets.push_back(*target);
  } else {
    for (std::size_t t = 0; t < k; ++t) {
      if (t != c) targets.push_back(t);
    }
  }
  const MarginOracle oracle = [&](double eps) {
    return dense_margin_lower_bounds(net, x0, eps, p, c, options.relu, options.margin);
  };
  CertificationResult result = search_radius(oracle, c, targets, options);
  result.norm = p;
  result.target = target;
  return result;
}

Tensor sample_perturbation(const Shape& shape, NormOrder p, double eps, bool on_boundary, std::mt19937_64& rng) {
  Tensor delta(shape);
  const std::size_t n = delta.size();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double radius =
      on_boundary ? eps : eps * std::pow(unit(rng), 1.0 / static_cast<double>(std::max<std::size_t>(n, 1)));
  switch (p) {
    case NormOrder::Linf: {
      for (std::size_t i = 0; i < n; ++i) {
        delta[i] = on_boundary ? (unit(rng) < 0.5 ? -eps : eps) : eps * (2.0 * unit(rng) - 1.0);
      }
      break;
    }
    case NormOrder::L2: {
      std::normal_distribution<double> gauss;
      double norm = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        delta[i] = gauss(rng);
        norm += delta[i] * delta[i];
      }
      norm = std::sqrt(norm);
      for (std::size_t i = 0; i < n; ++i) delta[i] = norm > 0 ? delta[i] * radius / norm : 0.0;
      break;
    }
    case NormOrder::L1: {
      std::exponential_distribution<double> expo(1.0);
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        delta[i] = expo(rng);
        total += delta[i];
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
        delta[i] = total > 0 ? sign * delta[i] * radius / total : 0.0;
      }
      break;
    }
  }
  return delta;
}

AttackResult sample_attack(const NetworkSpec& net, const Tensor& x0, NormOrder p, double eps, std::size_t budget,
                           std::uint64_t seed) {
  if (budget < 1) throw Error("sample_attack: budget must be at least 1");
  if (!(eps >= 0) || !std::isfinite(eps)) throw Error("sample_attack: eps must be finite and >= 0");
  std::mt19937_64 rng(seed);
  AttackResult result;
  result.predicted = predicted_class(forward(net, x0));
  const std::size_t c = result.predicted;
  result.best_margin = std::numeric_limits<double>::infinity();

  Tensor best;
  // Returns true (and records the flip) when x0 + delta changes the class.
  auto try_delta = [&](const Tensor& delta) {
    const Tensor logits = forward(net, add(x0, delta));
    ++result.evaluations;
    const double m = logit_margin(logits, c);
    const std::size_t cls = predicted_class(logits);
    if (m < result.best_margin || best.size() == 0) {
      result.best_margin = m;
      best = delta;
    }
    if (cls != c) {
      result.delta = delta;
      result.adversarial_class = cls;
      return true;
    }
    return false;
  };

  for (std::size_t s = 0; s < budget; ++s) {
    if (try_delta(sample_perturbation(x0.shape(), p, eps, s % 2 == 0, rng))) return result;
  }
  if (eps == 0) return result;

  const std::size_t n = best.size();
  auto improves = [&](const Tensor& cand) {
    const double before = result.best_margin;
    if (try_delta(cand)) return true;
    return result.best_margin < before;
  };
  switch (p) {
    case NormOrder::Linf: {
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t i = 0; i < n; ++i) {
          for (double v : {eps, -eps}) {
            if (best[i] == v) continue;
            Tensor cand = best;
            cand[i] = v;
            improves(cand);
            if (result.found()) return result;
          }
        }
      }
      break;
    }
    case NormOrder::L2: {
      for (double frac : {0.5, 0.25, 0.1}) {
        for (std::size_t i = 0; i < n; ++i) {
          for (double sign : {1.0, -1.0}) {
            Tensor cand = best;
            cand[i] += sign * frac * eps;
            double norm = 0.0;
            for (std::size_t k = 0; k < n; ++k) norm += cand[k] * cand[k];
            norm = std::sqrt(norm);
            if (norm == 0) continue;
            for (std::size_t k = 0; k < n; ++k) cand[k] *= eps / norm;
            improves(cand);
            if (result.found()) return result;
          }
        }
      }
      break;
    }
    case NormOrder::L1: {
      for (double mix : {1.0, 0.5}) {
        for (std::size_t i = 0; i < n; ++i) {
          for (double sign : {1.0, -1.0}) {
            Tensor cand = best;
            for (std::size_t k = 0; k < n; ++k) cand[k] *= 1.0 - mix;
            cand[i] += sign * mix * eps;
            improves(cand);
            if (result.found()) return result;
          }
        }
      }
      break;
    }
  }
  return result;
}

std::optional<double> attack_upper_bound(const NetworkSpec& net, const Tensor& x0, NormOrder p, std::size_t budget,
                                         std::uint64_t seed, double max_eps) {
  double below = 0.0;
  std::optional<double> flip;
  for (double eps = 0.01; eps <= max_eps * (1 + 1e-12); eps *= 2) {
    if (sample_attack(net, x0, p, eps, budget, seed).found()) {
      flip = eps;
      break;
    }
    below = eps;
  }
  if (!flip) return std::nullopt;
  double hi = *flip;
  for (int it = 0; it < 12; ++it) {
    const double mid = 0.5 * (below + hi);
    if (sample_attack(net, x0, p, mid, budget, seed).found()) hi = mid;
    else below = mid;
  }
  return hi;
}

SandwichReport sandwich_check(const NetworkSpec& net, const LayerRef& layer, const Tensor& x0, double eps,
                              NormOrder p, std::size_t samples, std::uint64_t seed, ReluRelaxation relu) {
  if (samples < 1) throw Error("sandwich_check: samples must be at least 1");
  const NetworkBounds sites = intermediate_bounds(net, x0, eps, p, relu);
  const LinearBoundMap map = bound_map_for(net, layer, sites, relu);
  std::mt19937_64 rng(seed);
  SandwichReport report{layer, samples, 0.0};
  for (std::size_t s = 0; s < samples; ++s) {
    const Tensor x = s == 0 ? x0 : add(x0, sample_perturbation(x0.shape(), p, eps, s % 2 == 1, rng));
    const ForwardTrace trace = forward_trace(net, x);
    const Tensor& value = trace.at(layer);
    const IntervalBounds lin = map.evaluate(x);
    for (std::size_t i = 0; i < value.size(); ++i) {
      report.max_violation = std::max({report.max_violation, value[i] - lin.upper[i], lin.lower[i] - value[i]});
    }
  }
  return report;
}

std::vector<SandwichReport> sandwich_check_all(const NetworkSpec& net, const Tensor& x0, double eps, NormOrder p,
                                               std::size_t samples, std::uint64_t seed, ReluRelaxation relu) {
  std::vector<LayerRef> layers = relaxation_sites(net);
  layers.push_back({net.blocks.size(), false});
  std::vector<SandwichReport> reports;
  for (const LayerRef& layer : layers) reports.push_back(sandwich_check(net, layer, x0, eps, p, samples, seed, relu));
  return reports;
}

}  // namespace cnncert
