#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "tsgm/heat_kernel.hpp"

using namespace tsgm;

TEST_CASE("heat kernel relaxes to the uniform density") {
  for (int dim = 1; dim <= 2; ++dim) {
    const TorusDomain dom(1.0, dim);
    for (double x : {0.0, 0.17, 0.5, 0.93})
      CHECK(std::abs(heat_kernel(dom, 10.0, TorusPoint{{x, 0.3}}) - 1.0) < 1e-10);
  }
}

TEST_CASE("heat kernel matches a K = 50 image-sum oracle") {
  const TorusDomain dom(1.0, 1);
  const double ref = oracle::image_kernel(1.0, 0.01, 0.0);
  CHECK(heat_kernel(dom, 0.01, TorusPoint{{0.0, 0.0}}) == doctest::Approx(ref).epsilon(1e-13));
  for (double t : {1e-4, 1e-3, 0.05, 0.2, 1.0})
    for (double x : {0.0, 0.1, 0.37, 0.5, 0.81}) {
      const double want = oracle::image_kernel(1.0, t, x);
      CHECK(heat_kernel(dom, t, wrap(dom, x)) == doctest::Approx(want).epsilon(1e-11));
      const double gref = oracle::image_kernel_dx(1.0, t, x);
      CHECK(std::abs(heat_kernel_grad(dom, t, wrap(dom, x))[0] - gref) <=
            1e-9 * std::max(1.0, std::abs(gref)));
    }
}

TEST_CASE("image sum and Fourier series agree at the crossover") {
  const TorusDomain dom(1.3, 1);
  const double tstar = HeatKernelConfig{}.crossover(dom);
  HeatKernelConfig images;
  images.crossover_time = 1e9;
  HeatKernelConfig fourier;
  fourier.crossover_time = 1e-9;
  for (double x : {0.0, 0.2, 0.5, 0.65, 1.1}) {
    const auto p = wrap(dom, x);
    CHECK(std::abs(heat_kernel(dom, tstar, p, images) - heat_kernel(dom, tstar, p, fourier)) < 1e-10);
    CHECK(std::abs(heat_kernel_grad(dom, tstar, p, images)[0] -
                   heat_kernel_grad(dom, tstar, p, fourier)[0]) < 1e-10);
  }
}

TEST_CASE("heat kernel is even, positive, and rejects t <= 0") {
  const TorusDomain dom(1.0, 2);
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const double t = std::pow(10.0, -3.0 + 3.0 * u(gen));
    const Vec raw{u(gen), u(gen)};
    const auto p = wrap(dom, raw);
    const auto q = wrap(dom, Vec{-raw[0], -raw[1]});
    CHECK(heat_kernel(dom, t, p) == doctest::Approx(heat_kernel(dom, t, q)).epsilon(1e-12));
    CHECK(heat_kernel(dom, t, p) > 0.0);
    const auto gp = heat_kernel_grad(dom, t, p), gq = heat_kernel_grad(dom, t, q);
    CHECK(std::abs(gp[0] + gq[0]) <= 1e-9 * std::max(1.0, std::abs(gp[0])));
    CHECK(std::abs(gp[1] + gq[1]) <= 1e-9 * std::max(1.0, std::abs(gp[1])));
  }
  const auto g0 = heat_kernel_grad(dom, 0.01, TorusPoint{});
  CHECK(g0[0] == 0.0);
  CHECK(g0[1] == 0.0);
  CHECK_THROWS_AS(heat_kernel(dom, 0.0, TorusPoint{}), Error);
  CHECK_THROWS_AS(heat_kernel_grad(dom, -1.0, TorusPoint{}), Error);
}

TEST_CASE("heat kernel gradient matches central differences") {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int dim = 1; dim <= 2; ++dim) {
    const TorusDomain dom(1.0, dim);
    for (int i = 0; i < 50; ++i) {
      const double t = std::pow(10.0, -2.0 + 2.0 * u(gen));
      const Vec x{u(gen), u(gen)};
      const auto g = heat_kernel_grad(dom, t, wrap(dom, x));
      const double h = 1e-5;
      for (int a = 0; a < dim; ++a) {
        Vec xp = x, xm = x;
        xp[a] += h;
        xm[a] -= h;
        const double fd =
            (heat_kernel(dom, t, wrap(dom, xp)) - heat_kernel(dom, t, wrap(dom, xm))) / (2 * h);
        CHECK(std::abs(fd - g[a]) <= 1e-6 * std::max(std::abs(g[a]), 1e-3));
      }
    }
  }
}

TEST_CASE("kernel normalisation over t in [1e-3, 10]") {
  const TorusDomain dom(1.0, 1);
  for (double t : {1e-3, 1e-2, 0.1, 1.0, 10.0}) {
    auto f = GridFunction::tabulate(dom, GridSpec(512), [&](const TorusPoint& x) { return heat_kernel(dom, t, x); });
    CHECK(std::abs(grid_integrate(f) - 1.0) < 1e-8);
  }
  const TorusDomain dom2(2.0, 2);
  auto f2 = GridFunction::tabulate(dom2, GridSpec(128), [&](const TorusPoint& x) { return heat_kernel(dom2, 0.01, x); });
  CHECK(std::abs(grid_integrate(f2) - 1.0) < 1e-8);
}

TEST_CASE("convolve_heat: stationarity, Dirac, semigroup") {
  const TorusDomain dom(1.0, 1);
  const GridSpec grid(256);
  const auto uni = GridDensity::uniform(dom, grid);
  const auto u2 = convolve_heat(uni, 0.3);
  for (double v : u2.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));

  const std::vector<TorusPoint> dirac{TorusPoint{}};
  const std::vector<double> w{1.0};
  const auto k = convolve_heat(dirac, w, dom, grid, 0.01);
  for (std::size_t i = 0; i < k.size(); i += 17)
    CHECK(k[i] == doctest::Approx(heat_kernel(dom, 0.01, k.function().node(i))).epsilon(1e-12));
  CHECK_THROWS_AS(convolve_heat(dirac, w, dom, grid, 0.0), Error);

  // Semigroup on a smooth bimodal density, both sides computed independently.
  const std::vector<TorusPoint> pts{TorusPoint{{0.2, 0}}, TorusPoint{{0.65, 0}}};
  const std::vector<double> pw{0.3, 0.7};
  const auto m = convolve_heat(pts, pw, dom, grid, 0.004);
  const auto lhs = convolve_heat(convolve_heat(m, 0.01), 0.02);
  const auto rhs = convolve_heat(m, 0.03);
  const auto direct = convolve_heat(pts, pw, dom, grid, 0.034);
  double l1 = 0.0, l1d = 0.0;
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    l1 += std::abs(lhs[i] - rhs[i]);
    l1d += std::abs(lhs[i] - direct[i]);
  }
  CHECK(l1 * grid.spacing(dom) < 1e-8);
  CHECK(l1d * grid.spacing(dom) < 1e-8);
  CHECK(convolve_heat(m, 0.0).values()[5] == m.values()[5]);
}

TEST_CASE("gradient estimate sup|grad Gamma(t)*g| sqrt(t) / |g|_inf is bounded and grid-stable") {
  const TorusDomain dom(1.0, 1);
  auto ratio_max = [&](int n) {
    const GridSpec grid(n);
    Spectral sp(dom, grid);
    auto g = GridFunction::tabulate(dom, grid, [](const TorusPoint& x) {
      return x[0] < 0.5 ? 1.0 : -1.0;
    });
    double worst = 0.0;
    for (double t : {1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0}) {
      const auto dg = sp.heat_derivative(g, t, 0);
      worst = std::max(worst, dg.max_abs() * std::sqrt(t) / g.max_abs());
    }
    return worst;
  };
  const double r1 = ratio_max(512), r2 = ratio_max(1024);
  CHECK(r1 < 2.0);
  CHECK(std::abs(r1 - r2) / r2 < 0.1);
}
