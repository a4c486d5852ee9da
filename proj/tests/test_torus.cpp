#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "tsgm/heat_kernel.hpp"
#include "tsgm/torus.hpp"

using namespace tsgm;

TEST_CASE("wrap reduces modulo R") {
  CHECK(wrap(TorusDomain(1.0, 1), 1.25)[0] == doctest::Approx(0.25));
  CHECK(wrap(TorusDomain(2.0, 1), -0.5)[0] == doctest::Approx(1.5));
  CHECK(wrap(TorusDomain(1.0, 1), 0.3)[0] == doctest::Approx(0.3));
  CHECK(wrap(TorusDomain(1.0, 1), -1e-18)[0] < 1.0);
  CHECK_THROWS_AS(wrap(TorusDomain(1.0, 1), NAN), Error);
  CHECK_THROWS_AS(wrap(TorusDomain(1.0, 1), INFINITY), Error);
}

TEST_CASE("domain and grid validation") {
  CHECK_THROWS_AS(TorusDomain(0.0, 1), Error);
  CHECK_THROWS_AS(TorusDomain(1.0, 3), Error);
  CHECK_THROWS_AS(GridSpec(6), Error);
  CHECK_THROWS_AS(GridSpec(9), Error);
  CHECK(TorusDomain(2.0, 2).volume() == 4.0);
}

TEST_CASE("torus distance examples") {
  const TorusDomain d1(1.0, 1);
  CHECK(torus_distance(d1, wrap(d1, 0.1), wrap(d1, 0.9)) == doctest::Approx(0.2));
  CHECK(torus_distance(d1, wrap(d1, 0.4), wrap(d1, 0.4)) == 0.0);
  const TorusDomain d2(1.0, 2);
  CHECK(torus_distance(d2, TorusPoint{{0, 0}}, TorusPoint{{0.5, 0.5}}) ==
        doctest::Approx(std::sqrt(2.0) / 2));
}

TEST_CASE("wrap is idempotent and distance is a metric on random triples") {
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int dim = 1; dim <= 2; ++dim) {
    const TorusDomain dom(1.7, dim);
    for (int trial = 0; trial < 500; ++trial) {
      const auto x = wrap(dom, Vec{u(gen), u(gen)});
      const auto y = wrap(dom, Vec{u(gen), u(gen)});
      const auto z = wrap(dom, Vec{u(gen), u(gen)});
      const auto xx = wrap(dom, x.coords);
      CHECK(xx.coords == x.coords);
      const double dxy = torus_distance(dom, x, y);
      CHECK(dxy == doctest::Approx(torus_distance(dom, y, x)));
      CHECK(dxy <= std::sqrt(double(dim)) * dom.radius() / 2 + 1e-12);
      CHECK(torus_distance(dom, x, z) <= dxy + torus_distance(dom, y, z) + 1e-12);
    }
  }
}

TEST_CASE("grid integration") {
  const TorusDomain dom(1.0, 1);
  const GridSpec grid(64);
  auto ones = GridFunction::tabulate(dom, grid, [](const TorusPoint&) { return 1.0; });
  CHECK(grid_integrate(ones) == doctest::Approx(1.0).epsilon(1e-14));
  auto sine = GridFunction::tabulate(dom, grid, [](const TorusPoint& x) { return std::sin(2 * M_PI * x[0]); });
  CHECK(std::abs(grid_integrate(sine)) < 1e-12);

  const TorusDomain dom2(3.0, 2);
  auto ones2 = GridFunction::tabulate(dom2, GridSpec(16), [](const TorusPoint&) { return 1.0 / 9.0; });
  CHECK(grid_integrate(ones2) == doctest::Approx(1.0).epsilon(1e-14));

  GridFunction bad(dom, grid);
  bad[3] = NAN;
  CHECK_THROWS_AS(grid_integrate(bad), Error);
}

TEST_CASE("tabulated wrapped Gaussian integrates to one; fine-grid oracle agrees") {
  const double t = 0.01;
  const TorusDomain dom(1.0, 1);
  auto f = GridFunction::tabulate(dom, GridSpec(256), [&](const TorusPoint& x) {
    return heat_kernel(dom, t, x);
  });
  const double oracle_value =
      oracle::periodic_quadrature(1.0, 4096, [&](double x) { return oracle::image_kernel(1.0, t, x); });
  CHECK(std::abs(oracle_value - 1.0) < 1e-12);
  CHECK(std::abs(grid_integrate(f) - oracle_value) < 1e-8);
  // Refinement n -> 2n changes the integral by < 1e-8.
  auto f2 = GridFunction::tabulate(dom, GridSpec(512), [&](const TorusPoint& x) {
    return heat_kernel(dom, t, x);
  });
  CHECK(std::abs(grid_integrate(f2) - grid_integrate(f)) < 1e-8);
}

TEST_CASE("grid density invariants") {
  const TorusDomain dom(1.0, 1);
  GridFunction neg(dom, GridSpec(8), std::vector<double>(8, 1.0));
  neg[0] = -0.1;
  CHECK_THROWS_AS(GridDensity{neg}, Error);
  GridFunction half(dom, GridSpec(8), std::vector<double>(8, 0.5));
  CHECK_THROWS_AS(GridDensity{half}, Error);
  CHECK(grid_integrate(GridDensity::normalized(half).function()) == doctest::Approx(1.0));
}

TEST_CASE("ensembles must be wrapped and nonempty") {
  const TorusDomain dom(1.0, 1);
  CHECK_THROWS_AS(ParticleEnsemble(dom, {}, 0.0), Error);
  CHECK_THROWS_AS(ParticleEnsemble(dom, {TorusPoint{{1.5, 0}}}, 0.0), Error);
  CHECK(ParticleEnsemble(dom, {TorusPoint{{0.5, 0}}}, 0.0).size() == 1);
}
