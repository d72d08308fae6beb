#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "helpers.hpp"

#include "cnncert/certifier.hpp"
#include "cnncert/fixtures.hpp"
#include "cnncert/reference.hpp"

using namespace cnncert;
using testing::fixture;

namespace {

Tensor pair_input(double a, double b) { return testing::tensor3(1, 1, 2, {a, b}); }

}  // namespace

TEST_CASE("identity network bounds are the input box") {
  const NetworkSpec net = load_model_file(fixture("identity-1x1.json"));
  const IntervalBounds b = output_bounds(net, testing::scalar_input(0.3), 0.1, NormOrder::Linf, ReluRelaxation::Adaptive);
  CHECK(b.lower[0] == doctest::Approx(0.2));
  CHECK(b.upper[0] == doctest::Approx(0.4));
}

TEST_CASE("zero radius gives exact values at every site") {
  for (const Fixture& f : fixture_suite(12, 2019)) {
    CAPTURE(f.name);
    const Tensor x0 = random_input(f.net.input_shape, 1);
    const ForwardTrace trace = forward_trace(f.net, x0);
    const NetworkBounds nb = intermediate_bounds(f.net, x0, 0.0, NormOrder::L2, ReluRelaxation::Adaptive);
    CHECK(nb.sites.size() == relaxation_sites(f.net).size());
    for (const SiteBounds& s : nb.sites) {
      const Tensor& v = trace.at(s.layer);
      for (std::size_t i = 0; i < v.size(); ++i) {
        CHECK(std::abs(s.bounds.lower[i] - v[i]) < 1e-9);
        CHECK(std::abs(s.bounds.upper[i] - v[i]) < 1e-9);
      }
    }
    const IntervalBounds out = output_bounds(f.net, x0, 0.0, NormOrder::L2, ReluRelaxation::Adaptive);
    const Tensor y = forward(f.net, x0);
    for (std::size_t i = 0; i < y.size(); ++i) {
      CHECK(std::abs(out.lower[i] - y[i]) < 1e-9);
      CHECK(std::abs(out.upper[i] - y[i]) < 1e-9);
    }
  }
}

TEST_CASE("output bounds contain sampled outputs") {
  std::mt19937_64 rng(21);
  for (const Fixture& f : fixture_suite(12, 2019)) {
    CAPTURE(f.name);
    const Tensor x0 = random_input(f.net.input_shape, 2);
    for (NormOrder p : {NormOrder::L1, NormOrder::L2, NormOrder::Linf}) {
      const double eps = p == NormOrder::Linf ? 0.02 : 0.1;
      const IntervalBounds b = output_bounds(f.net, x0, eps, p, ReluRelaxation::Adaptive);
      for (int s = 0; s < 500 / 3; ++s) {
        const Tensor d = sample_perturbation(x0.shape(), p, eps, s % 2 == 0, rng);
        Tensor x = x0;
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += d[i];
        const Tensor y = forward(f.net, x);
        for (std::size_t i = 0; i < y.size(); ++i) {
          CHECK(y[i] >= b.lower[i] - 1e-9);
          CHECK(y[i] <= b.upper[i] + 1e-9);
        }
      }
    }
  }
}

TEST_CASE("margins of the two-logit identity network") {
  const NetworkSpec net = load_model_file(fixture("linear2.json"));
  const Tensor x0 = pair_input(1, 0);
  auto m = certify_margin(net, x0, 0.4, NormOrder::Linf, 0, 1);
  CHECK(m.margin == doctest::Approx(0.2));
  CHECK(m.certified);
  m = certify_margin(net, x0, 0.6, NormOrder::Linf, 0, 1);
  CHECK(m.margin == doctest::Approx(-0.2));
  CHECK_FALSE(m.certified);
  const auto all = margin_lower_bounds(net, x0, 0.0, NormOrder::L2, 0, ReluRelaxation::Adaptive, MarginForm::Difference);
  CHECK(std::isinf(all[0]));
  CHECK(all[1] == doctest::Approx(1.0));
  CHECK_THROWS_AS(certify_margin(net, x0, 0.1, NormOrder::Linf, 0, 0), Error);
  CHECK_THROWS_AS(certify_margin(net, x0, 0.1, NormOrder::Linf, 0, 2), Error);
}

TEST_CASE("margin tends to the logit gap as eps shrinks") {
  for (const Fixture& f : fixture_suite(6, 2019)) {
    const Tensor x0 = random_input(f.net.input_shape, 3);
    const Tensor y = forward(f.net, x0);
    const std::size_t c = predicted_class(y);
    const auto m = margin_lower_bounds(f.net, x0, 1e-9, NormOrder::L2, c, ReluRelaxation::Adaptive, MarginForm::Difference);
    for (std::size_t t = 0; t < y.size(); ++t) {
      if (t != c) CHECK(m[t] == doctest::Approx(y[c] - y[t]).epsilon(1e-6));
    }
  }
}

TEST_CASE("linear radii match the closed form") {
  const NetworkSpec net = load_model_file(fixture("linear2.json"));
  const Tensor x0 = pair_input(1, 0);
  const std::pair<NormOrder, double> cases[] = {
      {NormOrder::Linf, 0.5}, {NormOrder::L2, 1 / std::sqrt(2.0)}, {NormOrder::L1, 1.0}};
  for (auto [p, expected] : cases) {
    const auto r = certified_radius(net, x0, p, 1);
    CHECK(r.radius <= expected);
    CHECK(r.radius >= expected * (1 - 2e-3));
    CHECK_FALSE(r.never_certified);
    CHECK(r.binding_target == 1);
    CHECK(certify_margin(net, x0, r.radius, p, 0, 1).certified);
  }
}

TEST_CASE("ties are never certified") {
  const NetworkSpec net = load_model_file(fixture("linear2.json"));
  const auto r = certified_radius(net, pair_input(0.5, 0.5), NormOrder::L2, std::nullopt);
  CHECK(r.radius == 0.0);
  CHECK(r.never_certified);
}

TEST_CASE("untargeted radius is the smallest targeted radius") {
  const NetworkSpec net = load_model_file(fixture("linear2.json"));
  const Tensor x0 = pair_input(1, 0);
  CHECK(certified_radius(net, x0, NormOrder::L2, std::nullopt).radius ==
        certified_radius(net, x0, NormOrder::L2, 1).radius);
  for (const Fixture& f : fixture_suite(6, 2019)) {
    const Tensor x = random_input(f.net.input_shape, 4);
    const auto un = certified_radius(f.net, x, NormOrder::Linf, std::nullopt);
    for (std::size_t t = 0; t < f.net.num_classes(); ++t) {
      if (t == un.predicted) continue;
      CHECK(un.radius <= certified_radius(f.net, x, NormOrder::Linf, t).radius + 1e-15);
    }
  }
}

TEST_CASE("certification is monotone in eps") {
  for (const Fixture& f : fixture_suite(12, 2019)) {
    CAPTURE(f.name);
    const Tensor x0 = random_input(f.net.input_shape, 6);
    const std::size_t c = predicted_class(forward(f.net, x0));
    const std::size_t t = (c + 1) % f.net.num_classes();
    double prev = -std::numeric_limits<double>::infinity();
    for (double eps = 0.2; eps > 1e-4; eps /= 2) {
      const double m = certify_margin(f.net, x0, eps, NormOrder::L2, c, t).margin;
      CHECK(m >= prev - 1e-12);
      prev = m;
    }
  }
}

TEST_CASE("radius search bookkeeping") {
  // Margins 1 - eps and 2 - eps: the first target binds at eps = 1.
  const MarginOracle oracle = [](double eps) { return std::vector<double>{0.0, 1 - eps, 2 - eps}; };
  CertifyOptions opts;
  const auto r = search_radius(oracle, 0, {1, 2}, opts);
  CHECK(r.binding_target == 1);
  CHECK(r.radius <= 1.0);
  CHECK(r.radius >= 1.0 - 2e-3);
  CHECK(r.cache_hits > 0);
  CHECK(r.bound_evaluations <= r.trace.size());
  CHECK_FALSE(r.reached_max_eps);

  const MarginOracle always = [](double) { return std::vector<double>{0.0, 1.0}; };
  const auto capped = search_radius(always, 0, {1}, opts);
  CHECK(capped.reached_max_eps);
  CHECK(capped.radius == opts.max_eps);

  // Boundary below the initial step.
  const MarginOracle tiny = [](double eps) { return std::vector<double>{0.0, 1e-3 - eps}; };
  const auto small = search_radius(tiny, 0, {1}, opts);
  CHECK(small.radius <= 1e-3);
  CHECK(small.radius >= 1e-3 * (1 - 2e-3));
}

TEST_CASE("option validation") {
  CertifyOptions bad;
  bad.rel_tol = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.growth = 1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.eps_init = -1;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK(parse_margin_form("separate") == MarginForm::Separate);
  CHECK_THROWS_AS(parse_margin_form("ratio"), Error);
}

TEST_CASE("separate margins are never tighter than the difference form") {
  for (const Fixture& f : fixture_suite(12, 2019)) {
    CAPTURE(f.name);
    const Tensor x0 = random_input(f.net.input_shape, 8);
    const std::size_t c = predicted_class(forward(f.net, x0));
    const auto d = margin_lower_bounds(f.net, x0, 0.05, NormOrder::Linf, c, ReluRelaxation::Adaptive, MarginForm::Difference);
    const auto s = margin_lower_bounds(f.net, x0, 0.05, NormOrder::Linf, c, ReluRelaxation::Adaptive, MarginForm::Separate);
    for (std::size_t t = 0; t < d.size(); ++t) {
      if (t != c) CHECK(s[t] <= d[t] + 1e-9);
    }
  }
}
