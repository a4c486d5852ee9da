#include <doctest.h>

#include <cmath>

#include "tsgm/heat_kernel.hpp"
#include "tsgm/objectives.hpp"

using namespace tsgm;

namespace {

TargetDistribution two_bumps(const TorusDomain& dom) {
  return TargetDistribution::mixture(dom, {0.35, 0.65}, {wrap(dom, 0.2), wrap(dom, 0.6)}, {0.004, 0.01});
}

ScoreField sine_score(const TorusDomain& dom, double T, double amp = 1.0) {
  const double R = dom.radius();
  return ScoreField(
      dom, T, Provenance::exact,
      [R, amp](double t, const TorusPoint& x) {
        return Vec{amp * std::sin(2 * M_PI * x[0] / R) * (1 + t), 0.0};
      },
      [R, amp](double t, const TorusPoint& x) {
        return Mat2{amp * 2 * M_PI / R * std::cos(2 * M_PI * x[0] / R) * (1 + t), 0, 0, 0};
      },
      "sine");
}

// Log-spaced trapezoid in time, periodic rule in space: an independent route.
template <class F>
double brute_space_time(const TorusDomain& dom, int n, double lo, double hi, int m, F&& f) {
  const double h = dom.radius() / n;
  double total = 0.0, prev = 0.0, tprev = 0.0;
  for (int j = 0; j <= m; ++j) {
    const double t = lo * std::pow(hi / lo, static_cast<double>(j) / m);
    double row = 0.0;
    for (int i = 0; i < n; ++i) row += f(t, wrap(dom, i * h)) * h;
    if (j > 0) total += 0.5 * (row + prev) * (t - tprev);
    prev = row;
    tprev = t;
  }
  return total;
}

}  // namespace

TEST_CASE("time quadrature") {
  for (int n : {1, 2, 5, 32}) {
    const auto r = gauss_legendre(n);
    for (int p = 0; p <= 2 * n - 1; ++p) {
      double s = 0.0;
      for (const auto& [x, w] : r) s += w * std::pow(x, p);
      const double want = p % 2 ? 0.0 : 2.0 / (p + 1);
      CHECK(std::abs(s - want) < 1e-13);
    }
  }
  double s = 0.0;
  for (const auto& [t, w] : time_rule(1e-3, 1.0)) s += w / t;
  CHECK(std::abs(s - std::log(1000.0)) < 1e-10);
  CHECK(time_rule(0.3, 0.3).empty());
}

TEST_CASE("explicit score matching") {
  TorusDomain dom(1.0, 1);
  const HeatFlowLaw flow(two_bumps(dom));
  const auto exact = ScoreField::exact(flow, 1.0);
  ObjectiveOptions o;
  o.grid_n = 256;

  CHECK(std::abs(esm_objective(exact, flow, 0.01, 1.0, o).value) < 1e-10);

  SUBCASE("uniform flow reduces to the mean square of the field") {
    const HeatFlowLaw uni(TargetDistribution::uniform(dom));
    ScoreField s(dom, 1.0, Provenance::exact, [](double, const TorusPoint& x) {
      return Vec{std::sin(2 * M_PI * x[0]), 0.0};
    });
    CHECK(esm_objective(s, uni, 0.2, 0.7, o).value == doctest::Approx(0.5 * 0.5).epsilon(1e-12));
  }
  SUBCASE("perturbed exact score gives delta^2 times the weight of |g|^2") {
    const auto dir = Direction::mode(dom, 3, 0.4);
    for (double dp : {0.1, 0.3}) {
      const auto p = perturb(exact, dir, dp);
      const double direct = brute_space_time(dom, 300, 0.01, 1.0, 600, [&](double t, const TorusPoint& x) {
        const Vec g = dir.g(t, x);
        return dot(g, g) * flow.density(t, x);
      });
      const double got = esm_objective(p.field, flow, 0.01, 1.0, o).value;
      CHECK(std::abs(got - dp * dp * p.g_scale * p.g_scale * direct) < 1e-4 * got);
    }
  }
  SUBCASE("window additivity") {
    const auto p = perturb(exact, Direction::mode(dom, 1), 0.2).field;
    const double whole = esm_objective(p, flow, 0.01, 0.8, o).value;
    const double parts = esm_objective(p, flow, 0.01, 0.1, o).value + esm_objective(p, flow, 0.1, 0.8, o).value;
    CHECK(std::abs(whole - parts) < 1e-9 * whole);
  }
  SUBCASE("nonnegative") {
    for (double a : {0.0, 0.5, 3.0}) CHECK(esm_objective(sine_score(dom, 1.0, a), flow, 0.01, 1.0, o).value >= 0.0);
  }
  SUBCASE("a flow without density at zero is rejected") {
    const HeatFlowLaw emp(TargetDistribution::empirical(dom, {wrap(dom, 0.1)}));
    try {
      esm_objective(exact, emp, 0.0, 0.5, o);
      FAIL("expected no-density");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::no_density);
    }
  }
  SUBCASE("json record") {
    const nlohmann::json j = esm_objective(exact, flow, 0.01, 1.0, o);
    CHECK(j["estimator"] == "grid-quadrature");
    CHECK(j["window"][1] == 1.0);
    CHECK(j["refinement_delta"].is_null());
  }
}

TEST_CASE("implicit score matching and the Fisher term") {
  TorusDomain dom(1.0, 1);
  ObjectiveOptions o;
  o.grid_n = 256;
  const HeatFlowLaw uni(TargetDistribution::uniform(dom));
  const HeatFlowLaw flow(two_bumps(dom));

  CHECK(ism_objective(ScoreField::zero(dom, 1.0), flow, 0.01, 1.0, o).value == 0.0);
  const auto s = sine_score(dom, 1.0);
  CHECK(std::abs(ism_objective(s, uni, 0.0, 1.0, o).value - esm_objective(s, uni, 0.0, 1.0, o).value) < 1e-8);

  const auto fu = fisher_term(uni, 0.01, 1.0, o);
  CHECK(fu.quadrature == 0.0);
  CHECK(std::abs(fu.entropy_route) < 1e-12);
  const auto fm = fisher_term(flow, 0.01, 1.0, o);
  CHECK(fm.quadrature > 0.0);
  CHECK(fm.relative_gap < 1e-3);
  CHECK(fisher_term(flow, 0.3, 0.3, o).quadrature == 0.0);
}

TEST_CASE("identity ESM = ISM + Fisher") {
  TorusDomain dom(1.0, 1);
  ObjectiveOptions o;
  o.grid_n = 256;
  SUBCASE("uniform flow") {
    const auto r = verify_identities(sine_score(dom, 1.0, 2.0), HeatFlowLaw(TargetDistribution::uniform(dom)), 0.0,
                                     1.0, o);
    CHECK(std::abs(r.residual) < 1e-8);
  }
  SUBCASE("mixture flow, perturbed score") {
    const HeatFlowLaw flow(two_bumps(dom));
    const auto p = perturb(ScoreField::exact(flow, 1.0), Direction::mode(dom, 2), 0.3).field;
    const auto r = verify_identities(p, flow, 0.01, 1.0, o);
    CHECK(r.relative < 1e-3);
  }
  SUBCASE("residual shrinks under refinement") {
    const auto pi =
        TargetDistribution::mixture(dom, {0.5, 0.5}, {wrap(dom, 0.3), wrap(dom, 0.55)}, {0.0002, 0.0003});
    const HeatFlowLaw flow(pi);
    const auto p = sine_score(dom, 0.5, 1.5);
    std::vector<double> res;
    for (int n : {8, 16, 32, 64}) {
      o.grid_n = n;
      res.push_back(std::abs(verify_identities(p, flow, 0.0002, 0.5, o).residual));
    }
    CHECK(std::log2(res[0] / res[1]) >= 1.0);
    CHECK(std::log2(res[1] / res[2]) >= 1.0);
    CHECK(res[3] < 1e-12);
  }
}

TEST_CASE("denoising score matching") {
  TorusDomain dom(1.0, 1);
  ObjectiveOptions o;
  o.grid_n = 512;

  SUBCASE("single point: the kernel score attains zero") {
    const std::vector<TorusPoint> one{wrap(dom, 0.37)};
    const auto s = ScoreField::exact(HeatFlowLaw(TargetDistribution::empirical(dom, one)), 1.0);
    CHECK(std::abs(dsm_objective(s, one, 0.01, 1.0, Estimator::grid_quadrature, o).value) < 1e-10);
  }
  SUBCASE("the empirical-flow score attains the conditional variance floor") {
    const std::vector<TorusPoint> pts{wrap(dom, 0.1), wrap(dom, 0.25), wrap(dom, 0.7)};
    const double eps = 0.05, T = 0.5;
    const auto s = ScoreField::exact(HeatFlowLaw(TargetDistribution::empirical(dom, pts)), T);
    o.grid_n = 256;
    const double got = dsm_objective(s, pts, eps, T, Estimator::grid_quadrature, o).value;
    const double oracle = brute_space_time(dom, 2048, eps, T, 400, [&](double t, const TorusPoint& x) {
      double eta = 0.0, gbar = 0.0;
      std::vector<double> k, g;
      for (const auto& z : pts) {
        const auto r = wrap(dom, x[0] - z[0]);
        k.push_back(heat_kernel(dom, t, r) / pts.size());
        g.push_back(heat_kernel_score(dom, t, r)[0]);
        eta += k.back();
        gbar += k.back() * g.back();
      }
      gbar /= eta;
      double var = 0.0;
      for (std::size_t j = 0; j < pts.size(); ++j) var += k[j] * (g[j] - gbar) * (g[j] - gbar);
      return var;
    });
    CHECK(std::abs(got - oracle) < 1e-4 * oracle);
  }
  SUBCASE("Monte Carlo and grid estimators agree") {
    const std::vector<TorusPoint> pts{wrap(dom, 0.1), wrap(dom, 0.3), wrap(dom, 0.45), wrap(dom, 0.8)};
    const auto s = perturb(ScoreField::zero(dom, 1.0), Direction::mode(dom, 1), 0.5).field;
    o.grid_n = 256;
    const auto g = dsm_objective(s, pts, 0.02, 1.0, Estimator::grid_quadrature, o);
    o.mc_samples = 200000;
    o.seed = 5;
    const auto m = dsm_objective(s, pts, 0.02, 1.0, Estimator::monte_carlo, o);
    CHECK(m.standard_error > 0.0);
    CHECK(std::abs(g.value - m.value) < 3 * m.standard_error);
  }
  SUBCASE("epsilon must be positive") {
    try {
      dsm_objective(ScoreField::zero(dom, 1.0), {wrap(dom, 0.1)}, 0.0, 1.0, Estimator::grid_quadrature, o);
      FAIL("expected invalid input");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::invalid_input);
    }
  }
}

TEST_CASE("finite-sample equivalence of DSM and ESM") {
  TorusDomain dom(1.0, 1);
  const std::vector<TorusPoint> pts{wrap(dom, 0.15), wrap(dom, 0.6)};
  const double eps = 0.05, T = 1.0;
  ObjectiveOptions o;
  o.grid_n = 256;

  PeriodicNetScore net(dom, {4, 16, 4}, eps, T, 8);
  TrainConfig cfg;
  cfg.epsilon = eps;
  cfg.horizon = T;
  cfg.steps = 150;
  train_dsm(net, pts, cfg);
  const HeatFlowLaw flow(TargetDistribution::empirical(dom, pts));
  const std::vector<ScoreField> scores{net.as_field(), ScoreField::zero(dom, T),
                                       perturb(ScoreField::exact(flow, T), Direction::mode(dom, 2), 0.4).field};
  std::vector<double> offsets;
  for (const auto& s : scores) {
    const auto r = verify_finite_sample(s, pts, eps, T, o);
    CHECK(r.relative < 1e-3);
    offsets.push_back(r.offset);
  }
  for (std::size_t a = 0; a < offsets.size(); ++a)
    for (std::size_t b = a + 1; b < offsets.size(); ++b)
      CHECK(std::abs(offsets[a] - offsets[b]) < 1e-6 * std::abs(offsets[a]));
}
