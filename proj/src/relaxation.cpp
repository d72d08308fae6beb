#include "cnncert/relaxation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cnncert {

namespace {

void check_interval(double l, double u) {
  if (!(l <= u)) {
    throw Error("relaxation interval has lower bound " + std::to_string(l) + " above upper bound " +
                std::to_string(u));
  }
}

LinearBound chord(Activation kind, double l, double u) {
  const double fl = activate(kind, l);
  const double slope = (activate(kind, u) - fl) / (u - l);
  return {slope, fl - slope * l};
}

LinearBound tangent(Activation kind, double d) {
  const double slope = activate_derivative(kind, d);
  return {slope, activate(kind, d) - slope * d};
}

constexpr int kMaxTangentIterations = 100;
constexpr double kTangentTolerance = 1e-10;

// Smallest d in [0, u] whose tangent passes on or above (l, f(l)). The
// returned point always satisfies the sound side of the residual.
double upper_tangent_point(Activation kind, double l, double u) {
  const double fl = activate(kind, l);
  auto residual = [&](double d) { return activate(kind, d) + activate_derivative(kind, d) * (l - d) - fl; };
  double lo = 0.0, hi = u;
  for (int it = 0; it < kMaxTangentIterations; ++it) {
    const double r = residual(hi);
    if (r <= kTangentTolerance && r >= 0.0) return hi;
    if (hi - lo <= std::numeric_limits<double>::epsilon() * std::max(1.0, hi)) return hi;
    const double mid = 0.5 * (lo + hi);
    if (residual(mid) >= 0.0) hi = mid;
    else lo = mid;
  }
  throw Error("upper tangent search did not converge for interval [" + std::to_string(l) + ", " +
              std::to_string(u) + "]");
}

// Largest d in [l, 0] whose tangent passes on or below (u, f(u)).
double lower_tangent_point(Activation kind, double l, double u) {
  const double fu = activate(kind, u);
  auto residual = [&](double d) { return activate(kind, d) + activate_derivative(kind, d) * (u - d) - fu; };
  double lo = l, hi = 0.0;
  for (int it = 0; it < kMaxTangentIterations; ++it) {
    const double r = residual(lo);
    if (r >= -kTangentTolerance && r <= 0.0) return lo;
    if (hi - lo <= std::numeric_limits<double>::epsilon() * std::max(1.0, -lo)) return lo;
    const double mid = 0.5 * (lo + hi);
    if (residual(mid) <= 0.0) lo = mid;
    else hi = mid;
  }
  throw Error("lower tangent search did not converge for interval [" + std::to_string(l) + ", " +
              std::to_string(u) + "]");
}

template <class F>
Relaxation relax_tensor(const Tensor& l, const Tensor& u, F&& per_neuron) {
  if (l.shape() != u.shape()) {
    throw Error("relaxation bounds have mismatched shapes " + to_string(l.shape()) + " and " + to_string(u.shape()));
  }
  Relaxation r{Tensor(l.shape()), Tensor(l.shape()), Tensor(l.shape()), Tensor(l.shape())};
  for (std::size_t i = 0; i < l.size(); ++i) {
    const NeuronRelaxation n = per_neuron(l[i], u[i]);
    r.slope_upper[i] = n.upper.slope;
    r.offset_upper[i] = n.upper.offset;
    r.slope_lower[i] = n.lower.slope;
    r.offset_lower[i] = n.lower.offset;
  }
  return r;
}

}  // namespace

ReluRelaxation parse_relu_relaxation(const std::string& text) {
  if (text == "relu-fastlin" || text == "fastlin") return ReluRelaxation::FastLin;
  if (text == "relu-adaptive" || text == "adaptive" || text == "smooth") return ReluRelaxation::Adaptive;
  throw Error("unknown relaxation '" + text + "'; expected relu-fastlin, relu-adaptive or smooth");
}

std::string to_string(ReluRelaxation mode) {
  return mode == ReluRelaxation::FastLin ? "relu-fastlin" : "relu-adaptive";
}

NeuronRelaxation relax_relu_fastlin(double l, double u) {
  check_interval(l, u);
  if (u <= 0) return {{0.0, 0.0}, {0.0, 0.0}};
  if (l >= 0) return {{1.0, 0.0}, {1.0, 0.0}};
  const double s = u / (u - l);
  return {{s, -s * l}, {s, 0.0}};
}

NeuronRelaxation relax_relu_adaptive(double l, double u) {
  check_interval(l, u);
  if (u <= 0) return {{0.0, 0.0}, {0.0, 0.0}};
  if (l >= 0) return {{1.0, 0.0}, {1.0, 0.0}};
  const double s = u / (u - l);
  return {{s, -s * l}, {u >= -l ? 1.0 : 0.0, 0.0}};
}

NeuronRelaxation relax_smooth(Activation kind, double l, double u) {
  if (kind != Activation::Sigmoid && kind != Activation::Tanh && kind != Activation::Arctan) {
    throw Error("relax_smooth supports sigmoid, tanh and arctan, got " + to_string(kind));
  }
  check_interval(l, u);
  const double fl = activate(kind, l);
  const double fu = activate(kind, u);
  // Point (or numerically point) intervals: constant bounds from monotonicity.
  if (u - l <= 1e-12 * std::max(1.0, std::max(std::abs(l), std::abs(u)))) {
    return {{0.0, fu}, {0.0, fl}};
  }
  const double mid = 0.5 * (l + u);
  if (u <= 0) return {chord(kind, l, u), tangent(kind, mid)};
  if (l >= 0) return {tangent(kind, mid), chord(kind, l, u)};

  const LinearBound secant = chord(kind, l, u);
  NeuronRelaxation r;
  r.upper = secant.slope <= activate_derivative(kind, u) ? secant : tangent(kind, upper_tangent_point(kind, l, u));
  r.lower = secant.slope <= activate_derivative(kind, l) ? secant : tangent(kind, lower_tangent_point(kind, l, u));
  return r;
}

NeuronRelaxation relax_neuron(Activation kind, ReluRelaxation relu_mode, double l, double u) {
  switch (kind) {
    case Activation::None: return {{1.0, 0.0}, {1.0, 0.0}};
    case Activation::Relu:
      return relu_mode == ReluRelaxation::FastLin ? relax_relu_fastlin(l, u) : relax_relu_adaptive(l, u);
    default: return relax_smooth(kind, l, u);
  }
}

Relaxation relax_relu_fastlin(const Tensor& l, const Tensor& u) {
  return relax_tensor(l, u, [](double a, double b) { return relax_relu_fastlin(a, b); });
}

Relaxation relax_relu_adaptive(const Tensor& l, const Tensor& u) {
  return relax_tensor(l, u, [](double a, double b) { return relax_relu_adaptive(a, b); });
}

Relaxation relax_smooth(Activation kind, const Tensor& l, const Tensor& u) {
  return relax_tensor(l, u, [kind](double a, double b) { return relax_smooth(kind, a, b); });
}

Relaxation relax_activation(Activation kind, ReluRelaxation relu_mode, const Tensor& l, const Tensor& u) {
  return relax_tensor(l, u, [=](double a, double b) { return relax_neuron(kind, relu_mode, a, b); });
}

double PoolPlanes::upper(std::span<const double> x) const {
  double acc = upper_constant;
  for (std::size_t i = 0; i < coefficients.size(); ++i) acc += coefficients[i] * x[i];
  return acc;
}

double PoolPlanes::lower(std::span<const double> x) const {
  double acc = lower_constant;
  for (std::size_t i = 0; i < coefficients.size(); ++i) acc += coefficients[i] * x[i];
  return acc;
}

PoolPlanes maxpool_planes(std::span<const double> l, std::span<const double> u) {
  const std::size_t n = l.size();
  if (n == 0) throw Error("maxpool_planes: empty window");
  if (u.size() != n) throw Error("maxpool_planes: lower/upper window sizes differ");
  for (std::size_t i = 0; i < n; ++i) check_interval(l[i], u[i]);

  // Point intervals are widened downwards so every surviving entry has
  // u_i > l_i; the planes stay valid on the original (smaller) box.
  std::vector<double> lo(l.begin(), l.end());
  for (std::size_t i = 0; i < n; ++i) {
    const double width = 1e-9 * std::max(1.0, std::abs(u[i]));
    if (u[i] - lo[i] < width) lo[i] = u[i] - width;
  }

  PoolPlanes planes;
  planes.coefficients.assign(n, 0.0);
  planes.kept.assign(n, true);
  // An entry whose upper bound does not exceed another entry's lower bound
  // can never be the strict maximum.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n && planes.kept[i]; ++j) {
      if (j != i && u[i] <= lo[j]) planes.kept[i] = false;
    }
  }

  double max_l = -std::numeric_limits<double>::infinity();
  double min_u = std::numeric_limits<double>::infinity();
  double num = -1.0, den = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!planes.kept[i]) continue;
    const double width = u[i] - lo[i];
    max_l = std::max(max_l, lo[i]);
    min_u = std::min(min_u, u[i]);
    num += u[i] / width;
    den += 1.0 / width;
  }
  planes.gamma0 = num / den;
  planes.gamma = std::min(std::max(planes.gamma0, max_l), min_u);

  double g_sum = 0.0;
  double upper_const = planes.gamma;
  double min_l = std::numeric_limits<double>::infinity();
  double max_u = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    if (!planes.kept[i]) continue;
    const double c = std::clamp((u[i] - planes.gamma) / (u[i] - lo[i]), 0.0, 1.0);
    planes.coefficients[i] = c;
    g_sum += c;
    upper_const -= c * lo[i];
    min_l = std::min(min_l, lo[i]);
    max_u = std::max(max_u, u[i]);
  }
  planes.coefficient_sum = g_sum;
  planes.upper_constant = upper_const;
  if (g_sum < 1.0) planes.eta = min_l;
  else if (g_sum > 1.0) planes.eta = max_u;
  else planes.eta = planes.gamma;
  planes.lower_constant = planes.eta * (1.0 - g_sum);
  return planes;
}

PoolPlanes avgpool_planes(std::size_t window_size) {
  if (window_size == 0) throw Error("avgpool_planes: empty window");
  PoolPlanes planes;
  planes.coefficients.assign(window_size, 1.0 / static_cast<double>(window_size));
  planes.kept.assign(window_size, true);
  planes.coefficient_sum = 1.0;
  return planes;
}

}  // namespace cnncert
