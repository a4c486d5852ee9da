#include <doctest.h>

#include <cmath>
#include <fstream>
#include <string>

#include <unistd.h>

#include "tsgm/metrics.hpp"
#include "tsgm/pde.hpp"
#include "tsgm/sde.hpp"

using namespace tsgm;

namespace {

// CDF on [0, R) of a wrapped centred normal with variance v started at 0.
double wrapped_normal_cdf(double x, double v, double R) {
  const double sd = std::sqrt(v);
  auto Phi = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
  double s = 0.0;
  for (int k = -20; k <= 20; ++k) s += Phi((x + k * R) / sd) - Phi(k * R / sd);
  return s;
}

double two_sample_ks(std::vector<TorusPoint> a, std::vector<TorusPoint> b) {
  std::vector<double> x, y;
  for (const auto& p : a) x.push_back(p[0]);
  for (const auto& p : b) y.push_back(p[0]);
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  double D = 0.0;
  std::size_t i = 0, j = 0;
  while (i < x.size() && j < y.size()) {
    if (x[i] <= y[j]) ++i; else ++j;
    D = std::max(D, std::abs(static_cast<double>(i) / x.size() - static_cast<double>(j) / y.size()));
  }
  return D;
}

}  // namespace

TEST_CASE("sde configuration") {
  SdeConfig c;
  c.horizon = 1.0;
  c.dt = 0.3;
  CHECK_THROWS_AS(c.validate(), Error);
  c.dt = 0.25;
  CHECK(c.steps() == 4);
  c.particles = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK(histogram_bins(1000) == 8);
  CHECK(histogram_bins(100000) == 64);
  CHECK(histogram_bins(1000000) == 128);
}

TEST_CASE("forward noising") {
  TorusDomain dom(1.0, 1);
  SdeConfig cfg;
  cfg.horizon = 0.1;
  cfg.dt = 0.01;
  cfg.particles = 100000;
  cfg.seed = 3;

  SUBCASE("uniform is stationary") {
    const auto path = simulate_forward(TargetDistribution::uniform(dom), cfg);
    const double D = ks_statistic(path.final().points, 0, [](double x) { return x; });
    CHECK(D < ks_critical_1pct(cfg.particles));
  }
  SUBCASE("a point mass spreads as the heat kernel") {
    cfg.horizon = 0.05;
    const auto dirac = TargetDistribution::empirical(dom, {wrap(dom, 0.0)});
    const auto path = simulate_forward(dirac, cfg);
    const double D = ks_statistic(path.final().points, 0,
                                  [](double x) { return wrapped_normal_cdf(x, 0.1, 1.0); });
    CHECK(D < 1.63 / std::sqrt(static_cast<double>(cfg.particles)));
  }
  SUBCASE("determinism") {
    cfg.particles = 500;
    const auto pi = TargetDistribution::mixture(dom, {1.0}, {wrap(dom, 0.3)}, {0.01});
    const auto a = simulate_forward(pi, cfg), b = simulate_forward(pi, cfg);
    cfg.workers = 3;
    const auto c = simulate_forward(pi, cfg);
    cfg.seed = 4;
    const auto d = simulate_forward(pi, cfg);
    bool same_ab = true, same_ac = true, same_ad = true;
    for (std::size_t i = 0; i < 500; ++i) {
      same_ab &= a.final().points[i][0] == b.final().points[i][0];
      same_ac &= a.final().points[i][0] == c.final().points[i][0];
      same_ad &= a.final().points[i][0] == d.final().points[i][0];
    }
    CHECK(same_ab);
    CHECK(same_ac);
    CHECK(!same_ad);
  }
  SUBCASE("wrapping once at the end gives the same law") {
    cfg.particles = 20000;
    const auto pi = TargetDistribution::mixture(dom, {1.0}, {wrap(dom, 0.9)}, {0.02});
    const auto a = simulate_forward(pi, cfg);
    cfg.wrap_each_step = false;
    cfg.seed = 77;
    const auto b = simulate_forward(pi, cfg);
    CHECK(two_sample_ks(a.final().points, b.final().points) < 1.63 * std::sqrt(2.0 / 20000));
  }
  SUBCASE("histogram agrees with the Fokker-Planck solution") {
    const auto pi = TargetDistribution::mixture(dom, {0.5, 0.5}, {wrap(dom, 0.2), wrap(dom, 0.65)},
                                                {0.005, 0.01});
    const auto path = simulate_forward(pi, cfg);
    const GridSpec fine(256);
    const auto m0 = GridDensity::normalized(GridFunction::tabulate(
        dom, fine, [&](const TorusPoint& x) { return flow_density(pi, 0.0, x); }));
    const auto fp = solve_fokker_planck({DriftField::zero(dom), m0, cfg.horizon, 50});
    const auto f = fp.slice_values(fp.slices() - 1);
    const int bins = histogram_bins(cfg.particles);
    const auto hist = histogram(path.final(), bins);
    const int per = 256 / bins;
    const double h = fine.spacing(dom);
    double l1 = 0.0, floor = 0.0;
    for (int j = 0; j < bins; ++j) {
      // Composite Simpson over the bin's sub-intervals.
      double mass = 0.0;
      for (int k = 0; k < per; k += 2) {
        const int a = j * per + k;
        mass += h / 3 * (f[a % 256] + 4 * f[(a + 1) % 256] + f[(a + 2) % 256]);
      }
      const double emp = hist[j] / bins;
      l1 += std::abs(emp - mass);
      floor += std::sqrt(2 / M_PI) * std::sqrt(mass * (1 - mass) / cfg.particles);
    }
    CHECK(l1 < 3 * floor);
  }
}

TEST_CASE("reverse generation") {
  TorusDomain dom(1.0, 1);
  SdeConfig cfg;
  cfg.horizon = 0.25;
  cfg.seed = 11;

  SUBCASE("zero score keeps the uniform law") {
    cfg.dt = 0.01;
    cfg.particles = 100000;
    const auto path = simulate_reverse(ScoreField::zero(dom, cfg.horizon), cfg);
    CHECK(ks_statistic(path.final().points, 0, [](double x) { return x; }) <
          ks_critical_1pct(cfg.particles));
  }
  SUBCASE("exact score started from the noised law returns the target") {
    const auto pi = TargetDistribution::mixture(dom, {1.0}, {wrap(dom, 0.5)}, {0.04});
    cfg.particles = 10000;
    SdeConfig one = cfg;
    one.dt = cfg.horizon;  // a single Brownian increment is exact
    const auto start = simulate_forward(pi, one).final();
    cfg.dt = 5e-4;
    const auto gen = simulate_reverse(ScoreField::exact(HeatFlowLaw(pi), cfg.horizon), cfg, start.points);
    const ParticleEnsemble a(dom, pi.sample(cfg.particles, 101), 0.0);
    const ParticleEnsemble b(dom, pi.sample(cfg.particles, 202), 0.0);
    CHECK(w1_circle(gen.final(), a).distance < 2 * w1_circle(a, b).distance);
  }
  SUBCASE("step refinement converges") {
    const auto pi = TargetDistribution::mixture(dom, {1.0}, {wrap(dom, 0.5)}, {0.01});
    const auto s = ScoreField::exact(HeatFlowLaw(pi), cfg.horizon);
    cfg.particles = 20000;
    std::vector<ParticleEnsemble> finals;
    for (double dt : {0.025, 0.0125, 0.00625, 0.003125}) {
      cfg.dt = dt;
      finals.push_back(simulate_reverse(s, cfg).final());
    }
    double prev = 1e300;
    for (std::size_t k = 0; k + 1 < finals.size(); ++k) {
      const double d = w1_circle(finals[k], finals[k + 1]).distance;
      CHECK(d < prev);
      prev = d;
    }
  }
  SUBCASE("early stop shortens the run") {
    cfg.dt = 0.01;
    cfg.particles = 10;
    cfg.record_every = 5;
    const auto path = simulate_reverse(ScoreField::zero(dom, cfg.horizon), cfg,
                                       TargetDistribution::uniform(dom), 0.013);
    CHECK(path.final().time_stamp == doctest::Approx(0.237));
    CHECK(path.snapshots.size() == 1 + 4 + 1);
  }
  SUBCASE("score failures name the step") {
    cfg.dt = 0.05;
    cfg.particles = 4;
    ScoreField bad(dom, cfg.horizon, Provenance::trained, [](double t, const TorusPoint&) {
      if (t < 0.1) fail(ErrorKind::invalid_input, "boom");
      return Vec{0.0, 0.0};
    });
    try {
      simulate_reverse(bad, cfg);
      FAIL("expected failure");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::solver_diverged);
      CHECK(std::string(e.what()).find("step 3") != std::string::npos);
    }
  }
}

TEST_CASE("ensemble export") {
  TorusDomain dom(2.0, 2);
  SdeConfig cfg;
  cfg.horizon = 0.1;
  cfg.dt = 0.05;
  cfg.particles = 3;
  cfg.seed = 42;
  const auto path = simulate_forward(TargetDistribution::uniform(dom), cfg);
  char name[] = "/tmp/tsgm_ensXXXXXX";
  const int fd = mkstemp(name);
  REQUIRE(fd >= 0);
  close(fd);
  write_ensemble_csv(name, path.final(), cfg);
  std::ifstream in(name);
  std::string header, cols, row;
  std::getline(in, header);
  std::getline(in, cols);
  int rows = 0;
  while (std::getline(in, row)) ++rows;
  std::remove(name);
  CHECK(header.find("seed=42") != std::string::npos);
  CHECK(header.find("R=2") != std::string::npos);
  CHECK(header.find("d=2") != std::string::npos);
  CHECK(cols == "x,y");
  CHECK(rows == 3);
}
