#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "tsgm/certificates.hpp"
#include "tsgm/cli.hpp"
#include "tsgm/heat_kernel.hpp"

namespace tsgm::cli {

using nlohmann::json;

bool SuiteResult::passed() const {
  return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

void to_json(json& j, const CheckResult& c) {
  j = json{{"name", c.name},
           {"value", std::isfinite(c.value) ? json(c.value) : json()},
           {"tolerance", c.tolerance},
           {"passed", c.passed},
           {"detail", c.detail}};
}

void to_json(json& j, const SuiteResult& s) {
  std::size_t failed = 0;
  for (const auto& c : s.checks) failed += !c.passed;
  j = json{{"suite", s.suite}, {"passed", s.passed()}, {"failed", failed}, {"checks", s.checks}};
}

const std::vector<std::string>& verify_suites() {
  static const std::vector<std::string> s = {"identities", "kernels", "metrics", "pde", "certificates"};
  return s;
}

namespace {

/// value <= tolerance passes
CheckResult at_most(std::string name, double value, double tol, std::string detail = "") {
  return {std::move(name), value, tol, std::isfinite(value) && value <= tol, std::move(detail)};
}

TargetDistribution two_bumps(const TorusDomain& dom) {
  return TargetDistribution::mixture(dom, {0.4, 0.6}, {wrap(dom, 0.2 * dom.radius()), wrap(dom, 0.55 * dom.radius())},
                                     {0.005, 0.01});
}

struct Modes {
  std::vector<double> amp, phase;
  double operator()(double x, double R) const {
    double s = 0.0;
    for (std::size_t k = 0; k < amp.size(); ++k) s += amp[k] * std::sin(2 * M_PI * (k + 1) * x / R + phase[k]);
    return s;
  }
  static Modes draw(std::mt19937_64& gen, int K, double scale) {
    std::uniform_real_distribution<double> u(-1.0, 1.0), ph(0.0, 2 * M_PI);
    Modes m;
    for (int k = 0; k < K; ++k) {
      m.amp.push_back(scale * u(gen) / (k + 1));
      m.phase.push_back(ph(gen));
    }
    return m;
  }
};

// ---- identities ---------------------------------------------------------------

SuiteResult identities_suite() {
  SuiteResult r{"identities", {}};
  const TorusDomain dom(1.0, 1);
  const auto pi = two_bumps(dom);
  const HeatFlowLaw flow(pi);
  ObjectiveOptions oo;
  oo.grid_n = 256;
  const auto s = perturb(ScoreField::exact(flow, 1.0), Direction::mode(dom, 1), 0.5).field;
  const auto id = verify_identities(s, flow, 0.01, 1.0, oo);
  r.checks.push_back(at_most("esm-ism-fisher", id.relative, 1e-3, "|ESM - ISM - Fisher| / (1 + ESM)"));
  r.checks.push_back(at_most("fisher-routes", id.fisher.relative_gap, 1e-3, "quadrature vs entropy difference"));

  const auto sample = pi.sample(8, 11);
  std::vector<double> offsets;
  for (const auto& f : {ScoreField::zero(dom, 1.0), ScoreField::exact(flow, 1.0), s})
    offsets.push_back(verify_finite_sample(f, sample, 0.01, 1.0, oo).offset);
  const auto [lo, hi] = std::minmax_element(offsets.begin(), offsets.end());
  const double scale = std::max(std::abs(*lo), std::abs(*hi));
  r.checks.push_back(at_most("dsm-esm-offset-constant", (*hi - *lo) / scale, 1e-6, "three scores, N = 8"));

  const auto u = TargetDistribution::uniform(dom);
  const auto uid = verify_identities(ScoreField::exact(HeatFlowLaw(u), 1.0), HeatFlowLaw(u), 0.01, 1.0, oo);
  r.checks.push_back(at_most("uniform-residual", std::abs(uid.residual), 1e-8));
  return r;
}

// ---- kernels ------------------------------------------------------------------

SuiteResult kernels_suite() {
  SuiteResult r{"kernels", {}};
  for (int d : {1, 2}) {
    const TorusDomain dom(d == 1 ? 1.0 : 2.0, d);
    const GridSpec g(d == 1 ? 1024 : 128);
    double worst = 0.0;
    for (double t : {1e-3, 0.05, 1.0}) {
      if (d == 2 && t < 0.01) continue;
      const auto k = GridFunction::tabulate(dom, g, [&](const TorusPoint& x) { return heat_kernel(dom, t, x); });
      worst = std::max(worst, std::abs(grid_integrate(k) - 1.0));
    }
    r.checks.push_back(at_most("normalization-d" + std::to_string(d), worst, 1e-8));
  }
  {
    const TorusDomain dom(1.0, 1);
    const GridSpec g(512);
    const double s = 0.01, t = 0.03;
    auto tab = [&](double time) {
      return GridDensity::normalized(GridFunction::tabulate(dom, g, [&](const TorusPoint& x) { return heat_kernel(dom, time, x); }));
    };
    const auto lhs = convolve_heat(tab(s), t);
    const auto rhs = tab(s + t);
    double err = 0.0;
    for (std::size_t k = 0; k < lhs.size(); ++k) err = std::max(err, std::abs(lhs[k] - rhs[k]) / rhs.function().max_abs());
    r.checks.push_back(at_most("semigroup", err, 1e-8, "Gamma(t) * Gamma(s) against Gamma(s + t)"));
  }
  {
    const TorusDomain dom(2.0, 2);
    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    double err = 0.0, serr = 0.0;
    const double h = 1e-6;
    for (int trial = 0; trial < 50; ++trial) {
      const double t = std::pow(10.0, -2.0 + 2.0 * trial / 50.0);
      const TorusPoint x = wrap(dom, Vec{u(gen), u(gen)});
      const Vec gr = heat_kernel_grad(dom, t, x);
      const Vec sc = heat_kernel_score(dom, t, x);
      const double v = heat_kernel(dom, t, x);
      for (int i = 0; i < 2; ++i) {
        Vec e{0.0, 0.0};
        e[i] = h;
        const double fd = (heat_kernel(dom, t, wrap(dom, x.coords + e)) - heat_kernel(dom, t, wrap(dom, x.coords - e))) / (2 * h);
        err = std::max(err, std::abs(fd - gr[i]) / (1.0 + std::abs(gr[i])));
        serr = std::max(serr, std::abs(sc[i] - gr[i] / v) / (1.0 + std::abs(sc[i])));
      }
    }
    r.checks.push_back(at_most("gradient-vs-differences", err, 1e-5));
    r.checks.push_back(at_most("score-is-log-gradient", serr, 1e-10));
  }
  {
    const TorusDomain dom(1.0, 1);
    HeatKernelConfig images, spectral;
    images.crossover_time = 1e9;
    spectral.crossover_time = 1e-9;
    double err = 0.0;
    for (double t : {0.02, 0.08, 0.3})
      for (double x : {0.0, 0.13, 0.5, 0.77}) {
        const double a = heat_kernel(dom, t, wrap(dom, x), images), b = heat_kernel(dom, t, wrap(dom, x), spectral);
        err = std::max(err, std::abs(a - b) / b);
      }
    r.checks.push_back(at_most("images-vs-spectral", err, 1e-10));
  }
  return r;
}

// ---- metrics --------------------------------------------------------------------

SuiteResult metrics_suite() {
  SuiteResult r{"metrics", {}};
  const TorusDomain dom(1.0, 1);
  std::mt19937_64 gen(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + trial % 8;
    std::vector<TorusPoint> a, b;
    for (int i = 0; i < n; ++i) a.push_back(wrap(dom, u(gen))), b.push_back(wrap(dom, u(gen)));
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
      double c = 0.0;
      for (int i = 0; i < n; ++i) c += torus_distance(dom, a[i], b[perm[i]]);
      best = std::min(best, c / n);
    } while (std::next_permutation(perm.begin(), perm.end()));
    const auto w = w1_circle(dom, as_measure(std::span<const TorusPoint>(a)), as_measure(std::span<const TorusPoint>(b)));
    worst = std::max(worst, std::abs(w.distance - best));
  }
  r.checks.push_back(at_most("circle-vs-exhaustive-matching", worst, 1e-12, "100 instances, N <= 8"));

  const TorusDomain d2(1.0, 2);
  const GridSpec g(8);
  double bracket = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    auto dens = [&] {
      std::vector<double> v(64);
      for (auto& x : v) x = 0.1 + u(gen);
      return GridDensity::normalized(GridFunction(d2, g, v));
    };
    const auto a = dens(), b = dens();
    const auto exact = w1_grid(a, b);
    const auto ent = w1_grid_entropic(a, b, 0.02);
    bracket = std::max(bracket, std::abs(ent.distance - exact.distance) - ent.certified_bound - exact.certified_bound);
  }
  r.checks.push_back(at_most("entropic-within-certified-bound", std::max(bracket, 0.0), 1e-12, "8 x 8 grids"));

  double gap = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TorusPoint> a, b;
    for (int i = 0; i < 6; ++i) a.push_back(wrap(d2, Vec{u(gen), u(gen)})), b.push_back(wrap(d2, Vec{u(gen), u(gen)}));
    const auto cost = torus_cost(d2, a, b);
    const std::vector<double> w(6, 1.0 / 6);
    gap = std::max(gap, std::abs(assignment_cost(cost) - solve_transport_lp(w, w, cost).primal));
  }
  r.checks.push_back(at_most("assignment-vs-lp", gap, 1e-12));
  return r;
}

// ---- pde --------------------------------------------------------------------------

SuiteResult pde_suite() {
  SuiteResult r{"pde", {}};
  const TorusDomain dom(1.0, 1);
  const GridSpec g(128);
  std::mt19937_64 gen(43);
  auto drift = [&](double scale) {
    const auto a = Modes::draw(gen, 3, scale), c = Modes::draw(gen, 2, scale);
    return DriftField(dom, [a, c](double t, const TorusPoint& x) { return Vec{a(x[0], 1.0) + std::cos(3 * t) * c(x[0], 1.0), 0.0}; });
  };
  auto density = [&] {
    const auto m = Modes::draw(gen, 4, 0.4);
    return GridDensity::normalized(GridFunction::tabulate(dom, g, [&](const TorusPoint& x) { return 1.0 + m(x[0], 1.0); }));
  };
  double worst = 0.0;
  for (int trial = 0; trial < 4; ++trial) {
    const auto b1 = drift(0.8), b2 = drift(0.8);
    const auto m1 = density(), m2 = density();
    const auto pm = Modes::draw(gen, 4, 1.0);
    const auto psi = GridFunction::tabulate(dom, g, [&](const TorusPoint& x) { return pm(x[0], 1.0); });
    worst = std::max(worst, duality_check(b1, b2, m1, m2, psi, 0.25, 200).residual);
  }
  r.checks.push_back(at_most("duality-identity", worst, 1e-3, "4 random tuples, n = 128"));

  const auto path = solve_fokker_planck({drift(2.0), density(), 0.5});
  double mass = 0.0, neg = 0.0;
  for (std::size_t k = 0; k < path.slices(); ++k) {
    const auto f = path.slice(k);
    mass = std::max(mass, std::abs(grid_integrate(f) - 1.0));
    for (double v : f.values()) neg = std::max(neg, -v);
  }
  r.checks.push_back(at_most("mass-conservation", mass, 1e-10));
  r.checks.push_back(at_most("positivity", neg, 1e-12));

  const GridFunction c(dom, g, std::vector<double>(128, 2.5));
  const auto phi = solve_kbe({drift(1.0), c, 0.5});
  double cerr = 0.0;
  for (double v : phi.data()) cerr = std::max(cerr, std::abs(v - 2.5));
  r.checks.push_back(at_most("constant-terminal-preserved", cerr, 1e-12));
  return r;
}

// ---- certificates -----------------------------------------------------------------

SuiteResult certificates_suite() {
  SuiteResult r{"certificates", {}};
  const TorusDomain dom(1.0, 1);
  const GridSpec g(128);
  const DriftField b(dom, [](double, const TorusPoint& x) { return Vec{0.3 * std::sin(2 * M_PI * x[0]), 0.0}; });
  const auto m = GridDensity::normalized(
      GridFunction::tabulate(dom, g, [](const TorusPoint& x) { return 1.0 + 0.5 * std::cos(2 * M_PI * x[0]); }));
  const auto same = wup_experiment(b, b, m, m, 0.2);
  r.checks.push_back(at_most("wup-identical-inputs", same.lhs_d1.value + same.lhs_l1, 1e-14));
  bool consistent = true;
  for (const auto& c : same.certificates) consistent = consistent && !c.inconsistent;
  r.checks.push_back({"wup-identical-consistent", consistent ? 0.0 : 1.0, 0.0, consistent, ""});

  const auto cf = contraction_fit(m, default_contraction_times(1.0));
  r.checks.push_back(at_most("contraction-single-mode", std::abs(cf.omega / (4 * M_PI * M_PI) - 1.0), 1e-2));

  DsmTransferInputs in{.e_nn = 0.1, .delta = 0.2, .epsilon = 0.01, .T = 1.0, .c2_norm = 2.0, .d1_sample = 0.05};
  const double wide = dsm_to_esm_transfer(in).e_nn_prime;
  in.delta = 0.01;
  const double narrow = dsm_to_esm_transfer(in).e_nn_prime;
  r.checks.push_back({"transfer-monotone-in-delta", narrow - wide, 0.0, narrow > wide, "smaller density floor, larger bound"});

  WupInputs w;
  w.eps1 = 0.1;
  w.eps2 = 0.05;
  w.grad_b1.value = 4.0;
  w.T = 1.0;
  w.R = 1.0;
  w.init_d1 = {0.02, 0.0, "exact"};
  w.init_l1 = 0.1;
  const auto certs = wup_certificate(w, {0.0, 0.0, "exact"}, {0.0, 0.0, "exact"});
  const double want = (std::sqrt(4.0) + 1.0) * (0.02 + 0.1);
  r.checks.push_back(at_most("wup-l1-d1-algebra", std::abs(certs.at(0).rhs - want), 1e-14));
  return r;
}

}  // namespace

SuiteResult verify_suite(const std::string& name) {
  if (name == "identities") return identities_suite();
  if (name == "kernels") return kernels_suite();
  if (name == "metrics") return metrics_suite();
  if (name == "pde") return pde_suite();
  if (name == "certificates") return certificates_suite();
  fail(ErrorKind::invalid_input, "unknown suite '" + name + "'; available: " + json(verify_suites()).dump());
}

}  // namespace tsgm::cli
