#include "tsgm/pde.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tsgm/spectral.hpp"

namespace tsgm {
namespace {

double op_norm(const Mat2& J, int dim) {
  if (dim == 1) return std::abs(J.a00);
  // Largest singular value from the eigenvalues of J^T J.
  const double p = J.a00 * J.a00 + J.a10 * J.a10;
  const double q = J.a01 * J.a01 + J.a11 * J.a11;
  const double r = J.a00 * J.a01 + J.a10 * J.a11;
  const double mean = 0.5 * (p + q);
  const double disc = std::sqrt(std::max(0.0, 0.25 * (p - q) * (p - q) + r * r));
  return std::sqrt(mean + disc);
}

// Wavenumber tables in the storage order of Spectral's half-complex layout.
class Modes {
 public:
  Modes(const TorusDomain& domain, const GridSpec& grid) : sp(domain, grid), dim(domain.dim()) {
    Spectral::Coeffs probe(domain.dim() == 1 ? grid.n() / 2 + 1
                                             : static_cast<std::size_t>(grid.n()) * (grid.n() / 2 + 1),
                           1.0);
    sp.apply(probe, [&](double kx, double ky, bool nx, bool ny) {
      k2.push_back(kx * kx + ky * ky);
      ikx.emplace_back(0.0, nx ? 0.0 : kx);
      iky.emplace_back(0.0, ny ? 0.0 : ky);
      return 1.0;
    });
    const auto& nodes_domain = domain;
    GridFunction f(nodes_domain, grid);
    xs.reserve(f.size());
    for (std::size_t k = 0; k < f.size(); ++k) xs.push_back(f.node(k));
  }

  void heat(std::vector<double>& v, double alpha_t) {
    if (alpha_t == 0.0) return;
    if (alpha_t != cached_t_) {
      cached_t_ = alpha_t;
      mult_.resize(k2.size());
      for (std::size_t m = 0; m < k2.size(); ++m) mult_[m] = std::exp(-k2[m] * alpha_t);
    }
    auto c = sp.forward(v);
    for (std::size_t m = 0; m < c.size(); ++m) c[m] *= mult_[m];
    v = sp.inverse(std::move(c));
  }

  void gradient(const std::vector<double>& v, std::vector<double>& gx, std::vector<double>& gy) const {
    const auto c = sp.forward(v);
    auto cx = c;
    for (std::size_t m = 0; m < c.size(); ++m) cx[m] *= ikx[m];
    gx = sp.inverse(std::move(cx));
    if (dim == 2) {
      auto cy = c;
      for (std::size_t m = 0; m < c.size(); ++m) cy[m] *= iky[m];
      gy = sp.inverse(std::move(cy));
    } else {
      gy.assign(v.size(), 0.0);
    }
  }

  void divergence(const std::vector<double>& fx, const std::vector<double>& fy,
                  std::vector<double>& out) const {
    auto c = sp.forward(fx);
    for (std::size_t m = 0; m < c.size(); ++m) c[m] *= ikx[m];
    if (dim == 2) {
      const auto cy = sp.forward(fy);
      for (std::size_t m = 0; m < c.size(); ++m) c[m] += iky[m] * cy[m];
    }
    out = sp.inverse(std::move(c));
  }

  Spectral sp;
  int dim;
  std::vector<double> k2;
  std::vector<std::complex<double>> ikx, iky;
  std::vector<TorusPoint> xs;

 private:
  double cached_t_ = -1.0;
  std::vector<double> mult_;
};

struct DriftSample {
  std::vector<double> bx, by;
  double sup = 0.0;  ///< max over nodes of |bx| + |by|
};

void sample_drift(const DriftField& b, double t, const Modes& modes, DriftSample& out) {
  const std::size_t N = modes.xs.size();
  out.bx.resize(N);
  out.by.resize(N);
  out.sup = 0.0;
  for (std::size_t k = 0; k < N; ++k) {
    const Vec v = b(t, modes.xs[k]);
    if (!std::isfinite(v[0]) || !std::isfinite(v[1]))
      fail(ErrorKind::solver_diverged, "drift is not finite at t = " + std::to_string(t));
    out.bx[k] = v[0];
    out.by[k] = v[1];
    out.sup = std::max(out.sup, std::abs(v[0]) + std::abs(v[1]));
  }
}

void check_cfl(double dt, double sup, const TorusDomain& domain, const GridSpec& grid,
               double horizon, double extra = 0.0) {
  const double c = advection_cfl(dt, sup + extra, domain, grid);
  if (c > 1.5) {
    const int suggest = static_cast<int>(std::ceil(horizon / dt * c / 0.9));
    fail(ErrorKind::configuration, "time step violates the advection stability bound (CFL " +
                                       std::to_string(c) + "); use at least " +
                                       std::to_string(suggest) + " steps");
  }
}

void check_finite(const std::vector<double>& v, const char* what, int step) {
  for (double x : v)
    if (!std::isfinite(x))
      fail(ErrorKind::solver_diverged, std::string(what) + " produced non-finite values at step " +
                                           std::to_string(step));
}

int resolve_steps(int requested, const DriftField& b, double horizon, const GridSpec& grid) {
  if (requested < 0) fail(ErrorKind::invalid_input, "time_steps must be nonnegative");
  return requested > 0 ? requested : stable_time_steps(b, horizon, grid);
}

bool record_step(int k, int steps, int every) { return k == steps || k % every == 0; }

}  // namespace

DriftField::DriftField(TorusDomain domain, Fn b, JacobianFn jacobian, std::string name)
    : domain_(domain), b_(std::move(b)), jac_(std::move(jacobian)), name_(std::move(name)) {
  if (!b_) fail(ErrorKind::invalid_input, "drift callable is empty");
}

DriftField DriftField::zero(const TorusDomain& domain) {
  return DriftField(
      domain, [](double, const TorusPoint&) { return Vec{0.0, 0.0}; },
      [](double, const TorusPoint&) { return Mat2{}; }, "zero");
}

Mat2 DriftField::jacobian(double t, const TorusPoint& x) const {
  if (jac_) return jac_(t, x);
  const double eta = 1e-5 * domain_.radius();
  Mat2 J;
  auto col = [&](int j) {
    Vec e{0.0, 0.0};
    e[j] = eta;
    const Vec p = b_(t, wrap(domain_, x.coords + e));
    const Vec m = b_(t, wrap(domain_, x.coords - e));
    return Vec{(p[0] - m[0]) / (2 * eta), (p[1] - m[1]) / (2 * eta)};
  };
  const Vec c0 = col(0);
  J.a00 = c0[0];
  J.a10 = c0[1];
  if (domain_.dim() == 2) {
    const Vec c1 = col(1);
    J.a01 = c1[0];
    J.a11 = c1[1];
  }
  return J;
}

double drift_sup(const DriftField& b, double horizon, const GridSpec& grid, int time_samples) {
  GridFunction f(b.domain(), grid);
  double sup = 0.0;
  for (int j = 0; j <= time_samples; ++j) {
    const double t = horizon * j / std::max(time_samples, 1);
    for (std::size_t k = 0; k < f.size(); ++k) {
      const Vec v = b(t, f.node(k));
      sup = std::max(sup, std::abs(v[0]) + std::abs(v[1]));
    }
  }
  return sup;
}

NormEstimate grad_sup_estimate(const DriftField& b, double horizon, const GridSpec& grid,
                               int time_samples) {
  const TorusDomain& dom = b.domain();
  auto on = [&](int n) {
    const GridSpec g(n);
    GridFunction f(dom, g);
    const double h = g.spacing(dom);
    double sup = 0.0;
    std::vector<Vec> vals(f.size());
    for (int j = 0; j <= time_samples; ++j) {
      const double t = horizon * j / std::max(time_samples, 1);
      for (std::size_t k = 0; k < f.size(); ++k) vals[k] = b(t, f.node(k));
      for (std::size_t k = 0; k < f.size(); ++k) {
        Mat2 J;
        if (dom.dim() == 1) {
          const std::size_t kp = (k + 1) % n, km = (k + n - 1) % n;
          J.a00 = (vals[kp][0] - vals[km][0]) / (2 * h);
        } else {
          const std::size_t i = k / n, jj = k % n;
          const std::size_t ip = ((i + 1) % n) * n + jj, im = ((i + n - 1) % n) * n + jj;
          const std::size_t jp = i * n + (jj + 1) % n, jm = i * n + (jj + n - 1) % n;
          J.a00 = (vals[ip][0] - vals[im][0]) / (2 * h);
          J.a10 = (vals[ip][1] - vals[im][1]) / (2 * h);
          J.a01 = (vals[jp][0] - vals[jm][0]) / (2 * h);
          J.a11 = (vals[jp][1] - vals[jm][1]) / (2 * h);
        }
        sup = std::max(sup, op_norm(J, dom.dim()));
      }
    }
    return sup;
  };
  const double coarse = on(grid.n());
  const double fine = on(2 * grid.n());
  return {fine, std::abs(fine - coarse), 2 * grid.n()};
}

SpaceTimeField::SpaceTimeField(TorusDomain domain, GridSpec grid, double horizon)
    : domain_(domain), grid_(grid), horizon_(horizon) {}

GridFunction SpaceTimeField::slice(std::size_t k) const {
  const auto v = slice_values(k);
  return GridFunction(domain_, grid_, std::vector<double>(v.begin(), v.end()));
}

std::span<const double> SpaceTimeField::slice_values(std::size_t k) const {
  if (k >= times_.size()) fail(ErrorKind::invalid_input, "slice index out of range");
  return std::span<const double>(data_).subspan(k * nodes(), nodes());
}

void SpaceTimeField::append(double t, std::span<const double> values) {
  if (values.size() != nodes()) fail(ErrorKind::domain_mismatch, "slice size mismatch");
  times_.push_back(t);
  data_.insert(data_.end(), values.begin(), values.end());
}

void SpaceTimeField::reverse() {
  const std::size_t N = nodes(), S = times_.size();
  std::reverse(times_.begin(), times_.end());
  for (std::size_t k = 0; k < S / 2; ++k)
    std::swap_ranges(data_.begin() + k * N, data_.begin() + (k + 1) * N,
                     data_.begin() + (S - 1 - k) * N);
}

double advection_cfl(double dt, double drift_sup, const TorusDomain& domain, const GridSpec& grid) {
  return dt * drift_sup * M_PI / grid.spacing(domain);
}

int stable_time_steps(const DriftField& b, double horizon, const GridSpec& grid) {
  const double sup = 1.25 * drift_sup(b, horizon, grid, 64);
  const double per_unit = sup * M_PI / grid.spacing(b.domain()) / 0.9;
  return std::max(16, static_cast<int>(std::ceil(horizon * per_unit)));
}

SpaceTimeField solve_fokker_planck(const FPProblem& p) {
  const auto& dom = p.initial.domain();
  const auto& grid = p.initial.grid();
  if (!(dom == p.drift.domain())) fail(ErrorKind::domain_mismatch, "drift and density domains differ");
  if (!(p.horizon > 0.0)) fail(ErrorKind::invalid_input, "horizon must be positive");
  if (p.record_every < 1) fail(ErrorKind::invalid_input, "record_every must be >= 1");
  const int steps = resolve_steps(p.time_steps, p.drift, p.horizon, grid);
  const double dt = p.horizon / steps;

  Modes modes(dom, grid);
  const double cv = p.initial.function().cell_volume();
  std::vector<double> m(p.initial.values().begin(), p.initial.values().end());
  SpaceTimeField out(dom, grid, p.horizon);
  out.time_steps = steps;
  out.append(0.0, m);

  DriftSample b;
  std::vector<double> fx, fy, L, m1, m2;
  auto rhs = [&](const std::vector<double>& v, std::vector<double>& res) {
    fx.resize(v.size());
    fy.resize(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) {
      fx[k] = v[k] * b.bx[k];
      fy[k] = v[k] * b.by[k];
    }
    modes.divergence(fx, fy, res);
  };

  for (int s = 0; s < steps; ++s) {
    const double t = s * dt;
    modes.heat(m, 0.5 * dt);
    sample_drift(p.drift, t, modes, b);
    check_cfl(dt, b.sup, dom, grid, p.horizon);
    rhs(m, L);
    m1.resize(m.size());
    for (std::size_t k = 0; k < m.size(); ++k) m1[k] = m[k] + dt * L[k];
    sample_drift(p.drift, t + dt, modes, b);
    check_cfl(dt, b.sup, dom, grid, p.horizon);
    rhs(m1, L);
    m2.resize(m.size());
    for (std::size_t k = 0; k < m.size(); ++k) m2[k] = 0.75 * m[k] + 0.25 * (m1[k] + dt * L[k]);
    sample_drift(p.drift, t + 0.5 * dt, modes, b);
    rhs(m2, L);
    for (std::size_t k = 0; k < m.size(); ++k) m[k] = m[k] / 3.0 + 2.0 / 3.0 * (m2[k] + dt * L[k]);
    modes.heat(m, 0.5 * dt);
    check_finite(m, "Fokker-Planck solve", s);

    double clipped = 0.0;
    for (auto& v : m)
      if (v < 0.0) {
        clipped -= v * cv;
        v = 0.0;
      }
    if (clipped > 0.0) {
      double mass = 0.0;
      for (double v : m) mass += v * cv;
      for (auto& v : m) v /= mass;
      out.clipped_mass += clipped;
    }
    if (record_step(s + 1, steps, p.record_every)) out.append((s + 1) * dt, m);
  }
  out.flagged_invalid = out.clipped_mass > 1e-6;
  return out;
}

namespace {

void validate_kbe(const KBEProblem& p) {
  if (!(p.terminal.domain() == p.drift.domain()))
    fail(ErrorKind::domain_mismatch, "drift and terminal domains differ");
  if (!(p.horizon > 0.0)) fail(ErrorKind::invalid_input, "horizon must be positive");
  if (p.record_every < 1) fail(ErrorKind::invalid_input, "record_every must be >= 1");
  if (!(p.floor_M > 0.0)) fail(ErrorKind::invalid_input, "diffusion floor M must be positive");
  if (!(p.diffusion >= 1.0 / p.floor_M))
    fail(ErrorKind::invalid_input, "diffusion coefficient is below the floor 1/M");
  for (double v : p.terminal.values())
    if (!std::isfinite(v)) fail(ErrorKind::invalid_input, "terminal data is not finite");
}

// Backward split solve of d_tau v = alpha lap v + N(v, t) with tau = T - t.
template <class Nonlinear>
SpaceTimeField backward_solve(const KBEProblem& p, Nonlinear&& advect, std::vector<double> v,
                              const char* what) {
  const auto& dom = p.terminal.domain();
  const auto& grid = p.terminal.grid();
  const int steps = resolve_steps(p.time_steps, p.drift, p.horizon, grid);
  const double dt = p.horizon / steps;
  Modes modes(dom, grid);
  SpaceTimeField out(dom, grid, p.horizon);
  out.time_steps = steps;
  out.append(p.horizon, v);
  DriftSample b;
  std::vector<double> L, v1, v2;
  for (int s = 0; s < steps; ++s) {
    const double t_hi = p.horizon - s * dt;
    modes.heat(v, 0.5 * p.diffusion * dt);
    sample_drift(p.drift, t_hi, modes, b);
    advect(modes, b, v, L, dt, p.horizon);
    v1.resize(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) v1[k] = v[k] + dt * L[k];
    sample_drift(p.drift, t_hi - dt, modes, b);
    advect(modes, b, v1, L, dt, p.horizon);
    v2.resize(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) v2[k] = 0.75 * v[k] + 0.25 * (v1[k] + dt * L[k]);
    sample_drift(p.drift, t_hi - 0.5 * dt, modes, b);
    advect(modes, b, v2, L, dt, p.horizon);
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = v[k] / 3.0 + 2.0 / 3.0 * (v2[k] + dt * L[k]);
    modes.heat(v, 0.5 * p.diffusion * dt);
    check_finite(v, what, s);
    if (record_step(s + 1, steps, p.record_every)) out.append(p.horizon - (s + 1) * dt, v);
  }
  out.reverse();
  return out;
}

}  // namespace

SpaceTimeField solve_kbe(const KBEProblem& p) {
  validate_kbe(p);
  std::vector<double> gx, gy;
  auto advect = [&](const Modes& modes, const DriftSample& b, const std::vector<double>& v,
                    std::vector<double>& res, double dt, double T) {
    check_cfl(dt, b.sup, p.terminal.domain(), p.terminal.grid(), T);
    modes.gradient(v, gx, gy);
    res.resize(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) res[k] = -(b.bx[k] * gx[k] + b.by[k] * gy[k]);
  };
  return backward_solve(p, advect, std::vector<double>(p.terminal.values().begin(), p.terminal.values().end()),
                        "backward Kolmogorov solve");
}

namespace {

void require_terminal_at_least_one(const GridFunction& psi) {
  for (double v : psi.values())
    if (!(v >= 1.0)) fail(ErrorKind::invalid_terminal, "Hopf-Cole needs terminal data >= 1");
}

}  // namespace

SpaceTimeField solve_hjb_hopf_cole(const KBEProblem& p) {
  require_terminal_at_least_one(p.terminal);
  SpaceTimeField phi = solve_kbe(p);
  SpaceTimeField u(phi.domain(), phi.grid(), phi.horizon());
  u.time_steps = phi.time_steps;
  std::vector<double> buf(phi.nodes());
  for (std::size_t k = 0; k < phi.slices(); ++k) {
    const auto s = phi.slice_values(k);
    for (std::size_t i = 0; i < buf.size(); ++i) {
      if (!(s[i] > 0.0)) fail(ErrorKind::solver_diverged, "backward solution lost positivity");
      buf[i] = -2.0 * p.diffusion * std::log(s[i]);
    }
    u.append(phi.time(k), buf);
  }
  return u;
}

SpaceTimeField solve_hjb_direct(const KBEProblem& p) {
  validate_kbe(p);
  require_terminal_at_least_one(p.terminal);
  std::vector<double> gx, gy;
  auto advect = [&](const Modes& modes, const DriftSample& b, const std::vector<double>& v,
                    std::vector<double>& res, double dt, double T) {
    modes.gradient(v, gx, gy);
    double grad = 0.0;
    for (std::size_t k = 0; k < v.size(); ++k) grad = std::max(grad, 0.5 * (std::abs(gx[k]) + std::abs(gy[k])));
    check_cfl(dt, b.sup, p.terminal.domain(), p.terminal.grid(), T, grad);
    res.resize(v.size());
    for (std::size_t k = 0; k < v.size(); ++k)
      res[k] = -0.5 * (gx[k] * gx[k] + gy[k] * gy[k]) - (b.bx[k] * gx[k] + b.by[k] * gy[k]);
  };
  std::vector<double> u0(p.terminal.size());
  for (std::size_t k = 0; k < u0.size(); ++k) u0[k] = -2.0 * p.diffusion * std::log(p.terminal[k]);
  return backward_solve(p, advect, std::move(u0), "direct HJB solve");
}

double grad_sup(const GridFunction& f) {
  Modes modes(f.domain(), f.grid());
  std::vector<double> gx, gy;
  modes.gradient(std::vector<double>(f.values().begin(), f.values().end()), gx, gy);
  double sup = 0.0;
  for (std::size_t k = 0; k < gx.size(); ++k) sup = std::max(sup, std::hypot(gx[k], gy[k]));
  return sup;
}

BernsteinReport bernstein_report(const SpaceTimeField& phi, const NormEstimate& grad_b) {
  if (phi.slices() == 0) fail(ErrorKind::invalid_input, "empty solution path");
  BernsteinReport r;
  r.grad_b = grad_b;
  r.grid_n = phi.grid().n();
  const GridFunction psi = phi.slice(phi.slices() - 1);
  r.psi_sup = psi.max_abs();
  r.psi_c1 = r.psi_sup + grad_sup(psi);
  const double T = phi.horizon();
  Modes modes(phi.domain(), phi.grid());
  std::vector<double> gx, gy, v;
  for (std::size_t k = 0; k < phi.slices(); ++k) {
    const auto s = phi.slice_values(k);
    v.assign(s.begin(), s.end());
    modes.gradient(v, gx, gy);
    double g2 = 0.0;
    for (std::size_t i = 0; i < gx.size(); ++i) g2 = std::max(g2, gx[i] * gx[i] + gy[i] * gy[i]);
    r.max_grad_phi = std::max(r.max_grad_phi, std::sqrt(g2));
    const double tau = T - phi.time(k);
    r.bounded_terminal_ratio = std::max(
        r.bounded_terminal_ratio, tau * g2 / (std::pow(r.psi_sup, 3) * (T * grad_b.value + 1.0)));
    r.lipschitz_terminal_ratio = std::max(
        r.lipschitz_terminal_ratio, g2 / (std::pow(r.psi_c1, 3) * (1.0 + grad_b.value)));
  }
  return r;
}

BernsteinReport bernstein_report(const SpaceTimeField& phi, const DriftField& drift) {
  return bernstein_report(phi, grad_sup_estimate(drift, phi.horizon(), phi.grid()));
}

namespace {
constexpr char kMagic[8] = {'T', 'S', 'G', 'M', 'S', 'T', 'F', '1'};

template <class T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
}  // namespace

void write_binary(const std::string& path, const SpaceTimeField& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::io, "cannot open " + path + " for writing");
  os.write(kMagic, sizeof kMagic);
  put<std::int32_t>(os, f.domain().dim());
  put<std::int32_t>(os, f.grid().n());
  put<std::int32_t>(os, f.time_steps);
  put<std::int32_t>(os, static_cast<std::int32_t>(f.slices()));
  put<double>(os, f.horizon());
  put<double>(os, f.domain().radius());
  os.write(reinterpret_cast<const char*>(f.times().data()),
           static_cast<std::streamsize>(f.times().size() * sizeof(double)));
  os.write(reinterpret_cast<const char*>(f.data().data()),
           static_cast<std::streamsize>(f.data().size() * sizeof(double)));
  if (!os) fail(ErrorKind::io, "write failed for " + path);
}

SpaceTimeField read_binary(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::io, "cannot open " + path);
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0)
    fail(ErrorKind::io, path + " is not a space-time field file");
  const int dim = get<std::int32_t>(is);
  const int n = get<std::int32_t>(is);
  const int steps = get<std::int32_t>(is);
  const int slices = get<std::int32_t>(is);
  const double T = get<double>(is);
  const double R = get<double>(is);
  if (!is || slices < 0) fail(ErrorKind::io, "truncated header in " + path);
  SpaceTimeField f(TorusDomain(R, dim), GridSpec(n), T);
  f.time_steps = steps;
  std::vector<double> times(slices), buf(f.nodes());
  is.read(reinterpret_cast<char*>(times.data()), static_cast<std::streamsize>(slices * sizeof(double)));
  for (int k = 0; k < slices; ++k) {
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(double)));
    if (!is) fail(ErrorKind::io, "truncated payload in " + path);
    f.append(times[k], buf);
  }
  return f;
}

void write_csv_slice(const std::string& path, const SpaceTimeField& f, std::size_t slice) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::io, "cannot open " + path + " for writing");
  const GridFunction g = f.slice(slice);
  os << "# t=" << f.time(slice) << " T=" << f.horizon() << " R=" << f.domain().radius()
     << " d=" << f.domain().dim() << " n=" << f.grid().n() << "\n";
  os << (f.domain().dim() == 1 ? "x,value\n" : "x,y,value\n");
  os.precision(17);
  for (std::size_t k = 0; k < g.size(); ++k) {
    const auto x = g.node(k);
    os << x[0] << ',';
    if (f.domain().dim() == 2) os << x[1] << ',';
    os << g[k] << '\n';
  }
}

DualityCheck duality_check(const DriftField& b1, const DriftField& b2, const GridDensity& m1,
                           const GridDensity& m2, const GridFunction& psi, double T, int steps) {
  psi.require_same_layout(m1.function());
  psi.require_same_layout(m2.function());
  const double cv = psi.cell_volume();
  const int dim = psi.domain().dim();
  const auto p1 = solve_fokker_planck({b1, m1, T, steps});
  const auto p2 = solve_fokker_planck({b2, m2, T, steps});
  const auto phi = solve_kbe({b1, psi, T, steps});
  if (phi.slices() != p2.slices())
    fail(ErrorKind::configuration, "forward and backward solves stored different time grids");

  DualityCheck r;
  const auto a = p1.slice_values(p1.slices() - 1), c = p2.slice_values(p2.slices() - 1);
  const auto phi0 = phi.slice_values(0);
  double init = 0.0;
  for (std::size_t k = 0; k < psi.size(); ++k) {
    r.direct += psi[k] * (a[k] - c[k]) * cv;
    init += (m1[k] - m2[k]) * phi0[k] * cv;
  }

  const Spectral sp(psi.domain(), psi.grid());
  std::vector<double> row(phi.slices());
  for (std::size_t j = 0; j < phi.slices(); ++j) {
    const double t = phi.time(j);
    const auto slice = phi.slice(j);
    const auto dx = sp.derivative(slice, 0);
    const auto dy = dim == 2 ? sp.derivative(slice, 1) : dx;
    const auto m = p2.slice_values(j);
    double s = 0.0;
    for (std::size_t k = 0; k < psi.size(); ++k) {
      const auto x = psi.node(k);
      const Vec db = b2(t, x) - b1(t, x);
      s += m[k] * (dx[k] * db[0] + (dim == 2 ? dy[k] * db[1] : 0.0));
    }
    row[j] = s * cv;
  }
  double cross = 0.0;
  for (std::size_t j = 0; j + 1 < row.size(); ++j)
    cross += 0.5 * (row[j] + row[j + 1]) * (phi.time(j + 1) - phi.time(j));
  r.identity = init + cross;
  r.residual = std::abs(r.direct - r.identity);
  return r;
}

}  // namespace tsgm
