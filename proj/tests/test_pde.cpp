#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>

#include "oracles.hpp"
#include "tsgm/distributions.hpp"
#include "tsgm/heat_kernel.hpp"
#include "tsgm/metrics.hpp"
#include "tsgm/pde.hpp"

using namespace tsgm;

namespace {

double l1(std::span<const double> a, std::span<const double> b, double cv) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(a[k] - b[k]);
  return s * cv;
}

double integrate(std::span<const double> v, double cv) {
  double s = 0.0;
  for (double x : v) s += x;
  return s * cv;
}

// Smooth random field: a few low Fourier modes with random amplitudes.
struct RandomModes {
  std::vector<double> amp, phase;
  double operator()(double x, double R) const {
    double s = 0.0;
    for (std::size_t k = 0; k < amp.size(); ++k)
      s += amp[k] * std::sin(2 * M_PI * (k + 1) * x / R + phase[k]);
    return s;
  }
  static RandomModes draw(std::mt19937_64& gen, int K, double scale) {
    std::uniform_real_distribution<double> u(-1.0, 1.0), ph(0.0, 2 * M_PI);
    RandomModes m;
    for (int k = 0; k < K; ++k) {
      m.amp.push_back(scale * u(gen) / (k + 1));
      m.phase.push_back(ph(gen));
    }
    return m;
  }
};

DriftField random_drift(const TorusDomain& dom, std::mt19937_64& gen, double scale) {
  auto a = RandomModes::draw(gen, 3, scale), c = RandomModes::draw(gen, 2, scale);
  const double R = dom.radius();
  return DriftField(dom, [a, c, R](double t, const TorusPoint& x) {
    return Vec{a(x[0], R) + std::cos(3 * t) * c(x[0], R), 0.0};
  });
}

GridDensity random_density(const TorusDomain& dom, const GridSpec& g, std::mt19937_64& gen) {
  auto m = RandomModes::draw(gen, 4, 0.4);
  return GridDensity::normalized(GridFunction::tabulate(dom, g, [&](const TorusPoint& x) {
    return 1.0 + m(x[0], dom.radius());
  }));
}

GridDensity kernel_density(const TorusDomain& dom, const GridSpec& g, double t) {
  return GridDensity::normalized(GridFunction::tabulate(dom, g, [&](const TorusPoint& x) {
    return heat_kernel(dom, t, x);
  }));
}

struct DualityResidual {
  double direct, identity;
};

DualityResidual duality(const DriftField& b1, const DriftField& b2, const GridDensity& m1,
                        const GridDensity& m2, const GridFunction& psi, double T, int steps) {
  const double cv = psi.cell_volume();
  const auto p1 = solve_fokker_planck({b1, m1, T, steps});
  const auto p2 = solve_fokker_planck({b2, m2, T, steps});
  const auto phi = solve_kbe({b1, psi, T, steps});
  double direct = 0.0;
  const auto a = p1.slice_values(p1.slices() - 1), c = p2.slice_values(p2.slices() - 1);
  for (std::size_t k = 0; k < psi.size(); ++k) direct += psi[k] * (a[k] - c[k]) * cv;

  double init = 0.0;
  const auto phi0 = phi.slice_values(0);
  for (std::size_t k = 0; k < psi.size(); ++k) init += (m1[k] - m2[k]) * phi0[k] * cv;

  const Spectral sp(psi.domain(), psi.grid());
  std::vector<double> integrand(phi.slices());
  for (std::size_t j = 0; j < phi.slices(); ++j) {
    const double t = phi.time(j);
    CHECK(std::abs(t - p2.time(j)) < 1e-12);
    const auto dphi = sp.derivative(phi.slice(j), 0);
    const auto m = p2.slice_values(j);
    double s = 0.0;
    for (std::size_t k = 0; k < psi.size(); ++k) {
      const auto x = psi.node(k);
      s += m[k] * dphi[k] * (b2(t, x)[0] - b1(t, x)[0]) * cv;
    }
    integrand[j] = s;
  }
  double cross = 0.0;
  for (std::size_t j = 0; j + 1 < phi.slices(); ++j)
    cross += 0.5 * (integrand[j] + integrand[j + 1]) * (phi.time(j + 1) - phi.time(j));
  return {direct, init + cross};
}

}  // namespace

TEST_CASE("Fokker-Planck with zero drift follows the heat kernel") {
  TorusDomain dom(1.0, 1);
  GridSpec g(256);
  const double eps = 0.01, T = 0.1;
  const auto path = solve_fokker_planck({DriftField::zero(dom), kernel_density(dom, g, eps), T, 50, 10});
  const double cv = g.spacing(dom);
  for (std::size_t k = 0; k < path.slices(); ++k) {
    const auto want = kernel_density(dom, g, eps + path.time(k));
    CHECK(l1(path.slice_values(k), want.values(), cv) < 1e-6);
    CHECK(std::abs(integrate(path.slice_values(k), cv) - 1.0) < 1e-8);
  }
  const auto u = solve_fokker_planck({DriftField::zero(dom), GridDensity::uniform(dom, g), 1.0, 20});
  for (std::size_t k = 0; k < u.slices(); ++k)
    for (double v : u.slice_values(k)) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("Fokker-Planck with the true reverse score recovers the target") {
  TorusDomain dom(1.0, 1);
  GridSpec g(256);
  const auto pi = TargetDistribution::mixture(dom, {0.5, 0.5}, {wrap(dom, 0.3), wrap(dom, 0.7)},
                                              {0.01, 0.01});
  const HeatFlowLaw flow(pi);
  const double T = 0.5;
  DriftField reverse(dom, [&](double t, const TorusPoint& x) {
    return -2.0 * flow.score(std::max(T - t, 0.0), x);
  });
  FPProblem p{reverse, flow.on_grid(T, g), T};
  p.record_every = 1000000;
  const auto path = solve_fokker_planck(p);
  const auto target = flow.on_grid(0.0, g);
  const double cv = g.spacing(dom);
  CHECK(l1(path.slice_values(path.slices() - 1), target.values(), cv) < 2e-3);
  CHECK(!path.flagged_invalid);
  for (std::size_t k = 0; k < path.slices(); ++k)
    CHECK(std::abs(integrate(path.slice_values(k), cv) - 1.0) < 1e-8);
}

TEST_CASE("Fokker-Planck in two dimensions conserves mass and matches the heat kernel") {
  TorusDomain dom(1.0, 2);
  GridSpec g(64);
  const double eps = 0.01, T = 0.05;
  const auto path = solve_fokker_planck({DriftField::zero(dom), kernel_density(dom, g, eps), T, 20});
  const auto want = kernel_density(dom, g, eps + T);
  const double cv = std::pow(g.spacing(dom), 2);
  CHECK(l1(path.slice_values(path.slices() - 1), want.values(), cv) < 1e-6);
  DriftField swirl(dom, [](double, const TorusPoint& x) {
    return Vec{std::sin(2 * M_PI * x[1]), std::cos(2 * M_PI * x[0])};
  });
  const auto moved = solve_fokker_planck({swirl, kernel_density(dom, g, eps), T});
  for (std::size_t k = 0; k < moved.slices(); ++k)
    CHECK(std::abs(integrate(moved.slice_values(k), cv) - 1.0) < 1e-8);
}

TEST_CASE("stability violation reports a configuration error with a suggested step count") {
  TorusDomain dom(1.0, 1);
  GridSpec g(256);
  DriftField fast(dom, [](double, const TorusPoint&) { return Vec{50.0, 0.0}; });
  try {
    solve_fokker_planck({fast, GridDensity::uniform(dom, g), 1.0, 10});
    FAIL("expected a configuration error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::configuration);
    CHECK(std::string(e.what()).find("steps") != std::string::npos);
  }
  CHECK(stable_time_steps(fast, 1.0, g) * 1.0 >= 50.0 * M_PI * 256 / 0.9);
}

TEST_CASE("backward Kolmogorov solver") {
  TorusDomain dom(1.0, 1);
  GridSpec g(256);
  std::mt19937_64 gen(41);
  const double T = 0.3;

  SUBCASE("constants are preserved") {
    GridFunction c(dom, g, std::vector<double>(256, 2.5));
    const auto phi = solve_kbe({random_drift(dom, gen, 1.0), c, T});
    for (double v : phi.data()) CHECK(v == doctest::Approx(2.5).epsilon(1e-12));
  }
  SUBCASE("zero drift is backward heat convolution") {
    auto m = RandomModes::draw(gen, 5, 1.0);
    const auto psi = GridFunction::tabulate(dom, g, [&](const TorusPoint& x) { return m(x[0], 1.0); });
    const auto phi = solve_kbe({DriftField::zero(dom), psi, T, 30, 3});
    const Spectral sp(dom, g);
    for (std::size_t k = 0; k < phi.slices(); ++k) {
      const auto want = sp.heat(psi, T - phi.time(k));
      for (std::size_t i = 0; i < psi.size(); ++i) CHECK(std::abs(phi.slice_values(k)[i] - want[i]) < 1e-6);
    }
  }
  SUBCASE("discrete maximum principle") {
    for (int trial = 0; trial < 5; ++trial) {
      auto m = RandomModes::draw(gen, 4, 1.0);
      const auto psi = GridFunction::tabulate(dom, g, [&](const TorusPoint& x) { return m(x[0], 1.0); });
      double lo = 1e300, hi = -1e300;
      for (double v : psi.values()) lo = std::min(lo, v), hi = std::max(hi, v);
      const auto phi = solve_kbe({random_drift(dom, gen, 2.0), psi, T});
      for (double v : phi.data()) {
        CHECK(v >= lo - 1e-10);
        CHECK(v <= hi + 1e-10);
      }
    }
  }
  SUBCASE("diffusion floor is validated") {
    KBEProblem p{DriftField::zero(dom), GridFunction(dom, g), T, 10};
    p.diffusion = 0.4;
    p.floor_M = 2.0;
    CHECK_THROWS_AS(solve_kbe(p), Error);
    p.floor_M = 4.0;
    CHECK_NOTHROW(solve_kbe(p));
  }
}

TEST_CASE("duality identity links forward and backward solves") {
  TorusDomain dom(1.0, 1);
  GridSpec g(256);
  std::mt19937_64 gen(43);
  const double T = 0.25;
  for (int trial = 0; trial < 20; ++trial) {
    const auto b1 = random_drift(dom, gen, 0.8);
    const auto b2 = random_drift(dom, gen, 0.8);
    const auto m1 = random_density(dom, g, gen);
    const auto m2 = random_density(dom, g, gen);
    auto pm = RandomModes::draw(gen, 4, 1.0);
    const auto psi = GridFunction::tabulate(dom, g, [&](const TorusPoint& x) { return pm(x[0], 1.0); });
    const auto r = duality(b1, b2, m1, m2, psi, T, 400);
    CHECK(std::abs(r.direct - r.identity) < 1e-4);
  }
}

TEST_CASE("Hopf-Cole transform and direct HJB solve agree") {
  TorusDomain dom(1.0, 1);
  GridSpec g(128);
  std::mt19937_64 gen(47);
  const double T = 0.1;

  SUBCASE("unit terminal gives zero") {
    GridFunction one(dom, g, std::vector<double>(128, 1.0));
    const auto u = solve_hjb_hopf_cole({random_drift(dom, gen, 1.0), one, T, 50});
    for (double v : u.data()) CHECK(std::abs(v) < 1e-12);
  }
  SUBCASE("terminal below one is rejected") {
    GridFunction half(dom, g, std::vector<double>(128, 0.5));
    try {
      solve_hjb_hopf_cole({DriftField::zero(dom), half, T, 10});
      FAIL("expected invalid terminal");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::invalid_terminal);
    }
  }
  SUBCASE("random smooth terminal in [1, 3]") {
    for (int trial = 0; trial < 3; ++trial) {
      auto m = RandomModes::draw(gen, 3, 0.6);
      const auto psi = GridFunction::tabulate(dom, g, [&](const TorusPoint& x) {
        return 2.0 + std::clamp(m(x[0], 1.0), -1.0, 1.0);
      });
      KBEProblem p{random_drift(dom, gen, 1.0), psi, T, 2000, 100};
      const auto phi = solve_kbe(p);
      const auto u = solve_hjb_hopf_cole(p);
      const auto direct = solve_hjb_direct(p);
      REQUIRE(direct.slices() == u.slices());
      double gap = 0.0, round_trip = 0.0;
      for (std::size_t k = 0; k < u.data().size(); ++k) {
        gap = std::max(gap, std::abs(direct.data()[k] + 2.0 * std::log(phi.data()[k])));
        round_trip = std::max(round_trip, std::abs(std::exp(-direct.data()[k] / 2.0) - phi.data()[k]));
        CHECK(u.data()[k] == doctest::Approx(-2.0 * std::log(phi.data()[k])).epsilon(1e-14));
      }
      CHECK(gap < 1e-6);
      CHECK(round_trip < 1e-6);
    }
  }
  SUBCASE("gradient of u stays bounded under refinement") {
    double prev = -1.0;
    for (int n : {128, 256}) {
      GridSpec gn(n);
      const auto psi = GridFunction::tabulate(dom, gn, [](const TorusPoint& x) {
        return 1.0 + 0.5 * (1.0 + std::sin(2 * M_PI * x[0]));
      });
      const auto u = solve_hjb_hopf_cole({DriftField::zero(dom), psi, 1.0, 200, 10});
      double sup = 0.0;
      for (std::size_t k = 0; k < u.slices(); ++k) sup = std::max(sup, grad_sup(u.slice(k)));
      CHECK(sup < 10.0);
      if (prev > 0) CHECK(sup == doctest::Approx(prev).epsilon(1e-6));
      prev = sup;
    }
  }
}

TEST_CASE("gradient sup-norm estimate of a drift") {
  TorusDomain d1(1.0, 1);
  for (double a : {1.0, 5.0, 25.0}) {
    DriftField b(d1, [a](double, const TorusPoint& x) {
      return Vec{a / (2 * M_PI) * std::sin(2 * M_PI * x[0]), 0.0};
    });
    const auto est = grad_sup_estimate(b, 1.0, GridSpec(128));
    CHECK(est.value == doctest::Approx(a).epsilon(1e-3));
    CHECK(est.uncertainty < 1e-3 * a);
    CHECK(est.grid_n == 256);
  }
  TorusDomain d2(2.0, 2);
  DriftField rot(d2, [](double, const TorusPoint& x) {
    return Vec{std::sin(M_PI * x[1]), -std::sin(M_PI * x[0])};
  });
  const auto est = grad_sup_estimate(rot, 1.0, GridSpec(32));
  CHECK(est.value == doctest::Approx(M_PI).epsilon(1e-2));
  CHECK(grad_sup_estimate(DriftField::zero(d2), 1.0, GridSpec(16)).value == 0.0);
}

TEST_CASE("Bernstein report") {
  TorusDomain dom(1.0, 1);
  const double T = 1.0;
  auto psi_on = [&](const GridSpec& g) {
    return GridFunction::tabulate(dom, g, [](const TorusPoint& x) {
      return 1.0 + 0.5 * (1.0 + std::sin(2 * M_PI * x[0]));
    });
  };
  // The ratio peaks at T - t of order 1 / (8 pi^2), so slices must be dense.
  auto steps_for = [&](const DriftField& b, const GridSpec& g) {
    return std::max(400, stable_time_steps(b, T, g));
  };
  auto drift = [&](double a) {
    return DriftField(dom, [a](double, const TorusPoint& x) {
      return Vec{a / (2 * M_PI) * std::sin(2 * M_PI * (x[0] - 0.1)), 0.0};
    });
  };

  SUBCASE("constant terminal") {
    GridSpec g(128);
    GridFunction c(dom, g, std::vector<double>(128, 3.0));
    const auto phi = solve_kbe({drift(5.0), c, T});
    const auto r = bernstein_report(phi, drift(5.0));
    CHECK(r.bounded_terminal_ratio == doctest::Approx(0.0).scale(1.0).epsilon(1e-20));
    CHECK(r.lipschitz_terminal_ratio == doctest::Approx(0.0).scale(1.0).epsilon(1e-20));
  }
  SUBCASE("refinement stability") {
    std::vector<double> ratios;
    for (int n : {128, 256, 512}) {
      GridSpec g(n);
      const auto phi = solve_kbe({drift(5.0), psi_on(g), T, steps_for(drift(5.0), g)});
      ratios.push_back(bernstein_report(phi, drift(5.0)).bounded_terminal_ratio);
    }
    const auto [lo, hi] = std::minmax_element(ratios.begin(), ratios.end());
    CHECK(*hi / *lo - 1.0 < 0.1);
  }
  SUBCASE("no growth with the drift gradient") {
    GridSpec g(256);
    std::vector<double> x, y;
    for (double a : {0.0, 1.0, 5.0, 25.0}) {
      const auto phi = solve_kbe({drift(a), psi_on(g), T, steps_for(drift(a), g)});
      const auto r = bernstein_report(phi, drift(a));
      CHECK(r.grad_b.value == doctest::Approx(a).epsilon(1e-3).scale(1e-3));
      x.push_back(std::log1p(r.grad_b.value));
      y.push_back(std::log(r.bounded_terminal_ratio));
    }
    CHECK(oracle::slope(x, y) < 0.1);
  }
}

TEST_CASE("space-time field export round trip") {
  TorusDomain dom(1.0, 2);
  GridSpec g(16);
  const double eps = 0.02;
  const auto path = solve_fokker_planck({DriftField::zero(dom), kernel_density(dom, g, eps), 0.01, 4});
  const std::string file = "pde_roundtrip.bin";
  write_binary(file, path);
  const auto back = read_binary(file);
  CHECK(back.slices() == path.slices());
  CHECK(back.time_steps == 4);
  CHECK(back.horizon() == 0.01);
  CHECK(back.data() == path.data());
  CHECK(back.times() == path.times());
  std::remove(file.c_str());
  write_csv_slice("pde_slice.csv", path, 1);
  std::FILE* f = std::fopen("pde_slice.csv", "r");
  REQUIRE(f != nullptr);
  int lines = 0;
  for (int c; (c = std::fgetc(f)) != EOF;) lines += c == '\n';
  std::fclose(f);
  CHECK(lines == 2 + 256);
  std::remove("pde_slice.csv");
  CHECK_THROWS_AS(read_binary("does-not-exist.bin"), Error);
}
