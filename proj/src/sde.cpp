#include "tsgm/sde.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <thread>

#include "tsgm/rng.hpp"

namespace tsgm {

int SdeConfig::steps() const {
  validate();
  return static_cast<int>(std::llround(horizon / dt));
}

void SdeConfig::validate() const {
  if (!(horizon > 0.0) || !std::isfinite(horizon)) fail(ErrorKind::configuration, "sde horizon must be positive");
  if (!(dt > 0.0)) fail(ErrorKind::configuration, "sde dt must be positive");
  if (particles < 1) fail(ErrorKind::configuration, "sde needs at least one particle");
  if (workers < 1) fail(ErrorKind::configuration, "workers must be >= 1");
  const double k = std::round(horizon / dt);
  if (k < 1 || std::abs(k * dt - horizon) > 1e-12 * std::max(1.0, horizon))
    fail(ErrorKind::configuration, "dt = " + std::to_string(dt) + " does not divide T = " +
                                       std::to_string(horizon));
}

namespace {

// Stream ids: particle i owns stream i; initial draws use a separate salt so that
// forward and reverse runs with one seed are still independent.
constexpr std::uint64_t kInitSalt = 0x1d1d1d1d00000000ULL;
constexpr std::uint64_t kReverseSalt = 0x7e7e7e7e7e7e7e7eULL;

template <class Body>
void parallel_for(std::size_t n, int workers, Body&& body) {
  if (workers <= 1 || n < 2) {
    body(0, n);
    return;
  }
  const std::size_t w = std::min<std::size_t>(workers, n);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(w);
  for (std::size_t k = 0; k < w; ++k) {
    const std::size_t lo = n * k / w, hi = n * (k + 1) / w;
    pool.emplace_back([&, k, lo, hi] {
      try {
        body(lo, hi);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct Schedule {
  std::vector<double> steps;  // step lengths
  std::vector<bool> record;   // record after step k
};

Schedule schedule(const SdeConfig& cfg, double duration) {
  Schedule s;
  const int full = static_cast<int>(std::floor(duration / cfg.dt + 1e-9));
  for (int k = 0; k < full; ++k) s.steps.push_back(cfg.dt);
  const double rest = duration - full * cfg.dt;
  if (rest > 1e-12 * std::max(1.0, duration)) s.steps.push_back(rest);
  s.record.assign(s.steps.size(), false);
  for (std::size_t k = 0; k < s.steps.size(); ++k)
    s.record[k] = k + 1 == s.steps.size() || (cfg.record_every > 0 && (k + 1) % cfg.record_every == 0);
  return s;
}

// Integrates all particles; drift(t, x) may be empty.
SdePath integrate(const TorusDomain& dom, std::vector<TorusPoint> x, const SdeConfig& cfg,
                  std::uint64_t salt, double duration,
                  const std::function<Vec(double, const TorusPoint&)>& drift) {
  const Schedule sch = schedule(cfg, duration);
  const int d = dom.dim();
  const std::size_t n = x.size();
  std::size_t recorded = 0;
  for (bool r : sch.record) recorded += r;
  std::vector<std::vector<TorusPoint>> snaps(recorded + 1, std::vector<TorusPoint>(n));
  std::vector<double> stamps(recorded + 1, 0.0);
  {
    double t = 0.0;
    std::size_t r = 1;
    for (std::size_t k = 0; k < sch.steps.size(); ++k) {
      t += sch.steps[k];
      if (sch.record[k]) stamps[r++] = t;
    }
    stamps.back() = duration;
  }
  parallel_for(n, cfg.workers, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      StreamRng rng(cfg.seed ^ salt, i);
      Vec p = x[i].coords;
      snaps[0][i] = x[i];
      double t = 0.0;
      std::size_t r = 1;
      for (std::size_t k = 0; k < sch.steps.size(); ++k) {
        const double h = sch.steps[k];
        if (drift) {
          Vec b;
          try {
            b = drift(t, cfg.wrap_each_step ? TorusPoint{p} : wrap(dom, p));
          } catch (const std::exception& e) {
            fail(ErrorKind::solver_diverged,
                 "score evaluation failed at step " + std::to_string(k) + ": " + e.what());
          }
          if (!std::isfinite(b[0]) || !std::isfinite(b[1]))
            fail(ErrorKind::solver_diverged, "non-finite drift at step " + std::to_string(k));
          p = p + h * b;
        }
        const double sd = std::sqrt(2.0 * h);
        for (int a = 0; a < d; ++a) p[a] += sd * rng.normal();
        if (cfg.wrap_each_step) p = wrap(dom, p).coords;
        t += h;
        if (sch.record[k]) snaps[r++][i] = wrap(dom, p);
      }
    }
  });
  SdePath path;
  for (std::size_t r = 0; r < snaps.size(); ++r)
    path.snapshots.emplace_back(dom, std::move(snaps[r]), stamps[r]);
  return path;
}

std::vector<TorusPoint> initial_points(const TargetDistribution& dist, const SdeConfig& cfg,
                                       std::uint64_t salt) {
  std::vector<TorusPoint> x(cfg.particles);
  parallel_for(x.size(), cfg.workers, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      StreamRng rng(cfg.seed ^ salt ^ kInitSalt, i);
      x[i] = dist.draw(rng);
    }
  });
  return x;
}

}  // namespace

SdePath simulate_forward(const TargetDistribution& pi, const SdeConfig& cfg) {
  cfg.validate();
  return integrate(pi.domain(), initial_points(pi, cfg, 0), cfg, 0, cfg.horizon, {});
}

SdePath simulate_reverse(const ScoreField& score, const SdeConfig& cfg,
                         const std::vector<TorusPoint>& initial, double stop) {
  cfg.validate();
  if (initial.empty()) fail(ErrorKind::invalid_input, "initial ensemble is empty");
  if (!(stop >= 0.0 && stop < cfg.horizon))
    fail(ErrorKind::invalid_input, "early stop must lie in [0, T)");
  if (std::abs(score.horizon() - cfg.horizon) > 1e-12 * cfg.horizon)
    fail(ErrorKind::configuration, "score horizon differs from the SDE horizon");
  const double T = cfg.horizon;
  const auto drift = [&score, T](double t, const TorusPoint& x) {
    return 2.0 * score.evaluate(std::max(T - t, 0.0), x);
  };
  return integrate(score.domain(), initial, cfg, kReverseSalt, T - stop, drift);
}

SdePath simulate_reverse(const ScoreField& score, const SdeConfig& cfg,
                         const TargetDistribution& initial, double stop) {
  cfg.validate();
  return simulate_reverse(score, cfg, initial_points(initial, cfg, kReverseSalt), stop);
}

SdePath simulate_reverse(const ScoreField& score, const SdeConfig& cfg) {
  return simulate_reverse(score, cfg, TargetDistribution::uniform(score.domain()));
}

double ks_statistic(const std::vector<TorusPoint>& points, int axis,
                    const std::function<double(double)>& cdf) {
  if (points.empty()) fail(ErrorKind::invalid_input, "KS statistic of an empty set");
  std::vector<double> v;
  v.reserve(points.size());
  for (const auto& p : points) v.push_back(p[axis]);
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double D = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double F = cdf(v[i]);
    D = std::max({D, (i + 1) / n - F, F - i / n});
  }
  return D;
}

double ks_critical_1pct(std::size_t n) { return 1.628 / std::sqrt(static_cast<double>(n)); }

int histogram_bins(std::size_t n) {
  const double c = std::cbrt(static_cast<double>(n));
  const int p = static_cast<int>(std::lround(std::log2(std::max(c, 1.0))));
  return std::max(8, 1 << p);
}

GridDensity histogram(const ParticleEnsemble& e, int bins) {
  if (e.points.empty()) fail(ErrorKind::invalid_input, "histogram of an empty ensemble");
  const TorusDomain& dom = e.domain;
  GridFunction f(dom, GridSpec(bins));
  const double h = f.spacing();
  auto index = [&](double c) { return std::min(bins - 1, static_cast<int>(c / h)); };
  const double unit = 1.0 / (static_cast<double>(e.size()) * f.cell_volume());
  for (const auto& p : e.points) {
    std::size_t k = index(p[0]);
    if (dom.dim() == 2) k = k * bins + index(p[1]);
    f[k] += unit;
  }
  return GridDensity(std::move(f), 1e-9);
}

void write_ensemble_csv(const std::string& path, const ParticleEnsemble& e, const SdeConfig& cfg) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot open " + path);
  out.precision(17);
  out << "# seed=" << cfg.seed << " dt=" << cfg.dt << " T=" << cfg.horizon << " R=" << e.domain.radius()
      << " d=" << e.domain.dim() << " t=" << e.time_stamp << "\n";
  out << (e.domain.dim() == 1 ? "x\n" : "x,y\n");
  for (const auto& p : e.points) {
    out << p[0];
    if (e.domain.dim() == 2) out << ',' << p[1];
    out << '\n';
  }
}

}  // namespace tsgm
