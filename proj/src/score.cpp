#include "tsgm/score.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "tsgm/heat_kernel.hpp"
#include "tsgm/rng.hpp"

namespace tsgm {

const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::exact: return "exact";
    case Provenance::perturbed: return "perturbed";
    case Provenance::trained: return "trained";
    case Provenance::tabulated: return "tabulated";
  }
  return "unknown";
}

namespace {

Mat2 fd_jacobian(const TorusDomain& dom, const ScoreField::Fn& f, double t, const TorusPoint& x) {
  const double eta = 1e-5 * dom.radius();
  Mat2 J;
  auto col = [&](int j) {
    Vec e{0.0, 0.0};
    e[j] = eta;
    const Vec p = f(t, wrap(dom, x.coords + e));
    const Vec m = f(t, wrap(dom, x.coords - e));
    return Vec{(p[0] - m[0]) / (2 * eta), (p[1] - m[1]) / (2 * eta)};
  };
  const Vec c0 = col(0);
  J.a00 = c0[0];
  J.a10 = c0[1];
  if (dom.dim() == 2) {
    const Vec c1 = col(1);
    J.a01 = c1[0];
    J.a11 = c1[1];
  }
  return J;
}

double op_norm(const Mat2& J) {
  // Largest singular value of a 2x2 matrix.
  const double a = J.a00 * J.a00 + J.a10 * J.a10;
  const double b = J.a00 * J.a01 + J.a10 * J.a11;
  const double c = J.a01 * J.a01 + J.a11 * J.a11;
  const double tr = a + c, det = a * c - b * b;
  return std::sqrt(0.5 * tr + std::sqrt(std::max(0.25 * tr * tr - det, 0.0)));
}

}  // namespace

// ---- ScoreField -------------------------------------------------------------

ScoreField::ScoreField(TorusDomain domain, double horizon, Provenance provenance, Fn s,
                       JacobianFn jacobian, std::string name)
    : domain_(domain),
      horizon_(horizon),
      provenance_(provenance),
      s_(std::move(s)),
      jac_(std::move(jacobian)),
      name_(std::move(name)) {
  if (!s_) fail(ErrorKind::invalid_input, "score callable is empty");
  if (!(horizon > 0.0) || !std::isfinite(horizon))
    fail(ErrorKind::invalid_input, "score horizon must be positive");
}

ScoreField ScoreField::exact(const HeatFlowLaw& flow, double horizon) {
  return ScoreField(
      flow.domain(), horizon, Provenance::exact,
      [flow](double t, const TorusPoint& x) { return flow.score(t, x); },
      [flow](double t, const TorusPoint& x) {
        const auto h = flow.evaluate(t, x).log_hessian;
        return Mat2{h.xx, h.xy, h.xy, h.yy};
      },
      std::string("exact:") + flow.base().kind_name());
}

ScoreField ScoreField::zero(const TorusDomain& domain, double horizon) {
  return ScoreField(
      domain, horizon, Provenance::exact, [](double, const TorusPoint&) { return Vec{0.0, 0.0}; },
      [](double, const TorusPoint&) { return Mat2{}; }, "zero");
}

void ScoreField::check_time(double t) const {
  if (!(t >= -1e-12 * horizon_ && t <= horizon_ * (1 + 1e-12)))
    fail(ErrorKind::invalid_input,
         "score evaluated at t = " + std::to_string(t) + " outside [0, " + std::to_string(horizon_) + "]");
}

Vec ScoreField::evaluate(double t, const TorusPoint& x) const {
  check_time(t);
  return s_(std::clamp(t, 0.0, horizon_), x);
}

Mat2 ScoreField::jacobian(double t, const TorusPoint& x) const {
  check_time(t);
  t = std::clamp(t, 0.0, horizon_);
  return jac_ ? jac_(t, x) : fd_jacobian(domain_, s_, t, x);
}

double ScoreField::divergence(double t, const TorusPoint& x) const {
  const Mat2 J = jacobian(t, x);
  return J.a00 + (domain_.dim() == 2 ? J.a11 : 0.0);
}

DriftField ScoreField::reverse_drift() const {
  const ScoreField self = *this;
  const double T = horizon_;
  return DriftField(
      domain_,
      [self, T](double t, const TorusPoint& x) { return -2.0 * self.evaluate(std::max(T - t, 0.0), x); },
      [self, T](double t, const TorusPoint& x) {
        const Mat2 J = self.jacobian(std::max(T - t, 0.0), x);
        return Mat2{-2 * J.a00, -2 * J.a01, -2 * J.a10, -2 * J.a11};
      },
      "reverse:" + name_);
}

// ---- perturbations -------------------------------------------------------------

Direction Direction::constant(int axis) {
  Direction g;
  g.g = [axis](double, const TorusPoint&) {
    Vec v{0.0, 0.0};
    v[axis] = 1.0;
    return v;
  };
  g.jacobian = [](double, const TorusPoint&) { return Mat2{}; };
  g.name = "constant";
  return g;
}

Direction Direction::mode(const TorusDomain& domain, int k, double phase) {
  const double w = 2 * M_PI * k / domain.radius();
  const bool two = domain.dim() == 2;
  Direction g;
  g.g = [w, phase, two](double, const TorusPoint& x) {
    return Vec{std::sin(w * x[0] + phase), two ? std::sin(w * x[1] + phase) : 0.0};
  };
  g.jacobian = [w, phase, two](double, const TorusPoint& x) {
    return Mat2{w * std::cos(w * x[0] + phase), 0.0, 0.0, two ? w * std::cos(w * x[1] + phase) : 0.0};
  };
  g.name = "mode" + std::to_string(k);
  return g;
}

PerturbedScore perturb(const ScoreField& base, const Direction& dir, double delta_p) {
  if (!(delta_p >= 0.0)) fail(ErrorKind::invalid_input, "perturbation magnitude must be >= 0");
  if (!dir.g) fail(ErrorKind::invalid_input, "perturbation direction is empty");
  const TorusDomain& dom = base.domain();
  const GridSpec grid(dom.dim() == 1 ? 256 : 64);
  const GridFunction probe(dom, grid);
  double sup = 0.0;
  for (int j = 0; j <= 16; ++j) {
    const double t = base.horizon() * j / 16.0;
    for (std::size_t k = 0; k < probe.size(); ++k) {
      const Vec v = dir.g(t, probe.node(k));
      sup = std::max(sup, std::sqrt(dot(v, v)));
    }
  }
  const double scale = sup > 0.0 ? 1.0 / sup : 1.0;
  const double amp = delta_p * scale;
  auto g = dir.g;
  ScoreField::JacobianFn gj = dir.jacobian;
  if (!gj) gj = [dom, g](double t, const TorusPoint& x) { return fd_jacobian(dom, g, t, x); };
  ScoreField field(
      dom, base.horizon(), Provenance::perturbed,
      [base, g, amp](double t, const TorusPoint& x) { return base.evaluate(t, x) + amp * g(t, x); },
      [base, gj, amp](double t, const TorusPoint& x) {
        const Mat2 a = base.jacobian(t, x), b = gj(t, x);
        return Mat2{a.a00 + amp * b.a00, a.a01 + amp * b.a01, a.a10 + amp * b.a10,
                    a.a11 + amp * b.a11};
      },
      base.name() + "+" + std::to_string(delta_p) + "*" + dir.name);
  return {std::move(field), delta_p, scale};
}

// ---- tabulation -----------------------------------------------------------------

namespace {

struct Table {
  TorusDomain domain;
  GridSpec grid;
  std::vector<double> times;
  std::vector<Vec> values;  // [time][node]

  Vec at_node(std::size_t j, std::size_t node) const { return values[j * grid.size(domain) + node]; }

  Vec spatial(std::size_t j, const TorusPoint& x) const {
    const int n = grid.n();
    const double h = grid.spacing(domain);
    auto split = [&](double c, int& i0, double& w) {
      const double u = c / h;
      i0 = static_cast<int>(std::floor(u));
      w = u - i0;
      i0 = ((i0 % n) + n) % n;
    };
    int i, k;
    double wi, wk;
    split(x[0], i, wi);
    const int i1 = (i + 1) % n;
    if (domain.dim() == 1) {
      if (wi == 0.0) return at_node(j, i);
      return (1 - wi) * at_node(j, i) + wi * at_node(j, i1);
    }
    split(x[1], k, wk);
    const int k1 = (k + 1) % n;
    auto f = [&](int a, int b) { return at_node(j, static_cast<std::size_t>(a) * n + b); };
    return (1 - wi) * ((1 - wk) * f(i, k) + wk * f(i, k1)) + wi * ((1 - wk) * f(i1, k) + wk * f(i1, k1));
  }

  Vec operator()(double t, const TorusPoint& x) const {
    if (times.size() == 1 || t <= times.front()) return spatial(0, x);
    if (t >= times.back()) return spatial(times.size() - 1, x);
    const auto it = std::upper_bound(times.begin(), times.end(), t);
    const std::size_t j = static_cast<std::size_t>(it - times.begin()) - 1;
    const double w = (t - times[j]) / (times[j + 1] - times[j]);
    if (w == 0.0) return spatial(j, x);
    return (1 - w) * spatial(j, x) + w * spatial(j + 1, x);
  }
};

}  // namespace

ScoreField tabulate(const ScoreField& s, const GridSpec& grid, std::vector<double> times) {
  if (times.empty()) fail(ErrorKind::invalid_input, "tabulation needs at least one time");
  std::sort(times.begin(), times.end());
  auto table = std::make_shared<Table>(Table{s.domain(), grid, times, {}});
  const GridFunction probe(s.domain(), grid);
  table->values.reserve(times.size() * probe.size());
  for (double t : times)
    for (std::size_t k = 0; k < probe.size(); ++k) table->values.push_back(s.evaluate(t, probe.node(k)));
  return ScoreField(
      s.domain(), s.horizon(), Provenance::tabulated,
      [table](double t, const TorusPoint& x) { return (*table)(t, x); }, {},
      "tabulated:" + s.name());
}

// ---- network ----------------------------------------------------------------------

struct PeriodicNetScore::Forward {
  double tc;  // clamped time
  std::vector<double> z, dz;  // dz: [axis][feature]
  std::vector<double> h1, h2;
  Vec out;
};

PeriodicNetScore::PeriodicNetScore(TorusDomain domain, NetShape shape, double t_min, double horizon,
                                   std::uint64_t seed)
    : domain_(domain), shape_(shape), t_min_(t_min), horizon_(horizon) {
  if (shape.fourier_order < 1 || shape.fourier_order > 8)
    fail(ErrorKind::configuration, "fourier_order must be in [1, 8]");
  if (shape.width < 1 || shape.width > 64) fail(ErrorKind::configuration, "width must be in [1, 64]");
  if (shape.time_features < 0 || shape.time_features > 16)
    fail(ErrorKind::configuration, "time_features must be in [0, 16]");
  if (!(t_min > 0.0) || !(horizon > t_min))
    fail(ErrorKind::invalid_input, "network time range needs 0 < t_min < T");
  const int F = shape.fourier_order;
  if (domain.dim() == 1) {
    for (int k = 1; k <= F; ++k) wavevectors_.push_back({k, 0});
  } else {
    for (int a = 0; a <= F; ++a)
      for (int b = -F; b <= F; ++b)
        if (a > 0 || b > 0) wavevectors_.push_back({a, b});
  }
  const Layout L = layout();
  theta_.assign(L.total, 0.0);
  StreamRng rng(seed, 0x6e6574);
  const int P = in_size(), W = shape.width, d = domain.dim();
  for (std::size_t i = 0; i < static_cast<std::size_t>(W * P); ++i)
    theta_[L.w1 + i] = rng.normal() / std::sqrt(static_cast<double>(P));
  for (std::size_t i = 0; i < static_cast<std::size_t>(W * W); ++i)
    theta_[L.w2 + i] = rng.normal() / std::sqrt(static_cast<double>(W));
  for (std::size_t i = 0; i < static_cast<std::size_t>(d * W); ++i)
    theta_[L.w3 + i] = 0.1 * rng.normal() / std::sqrt(static_cast<double>(W));
}

int PeriodicNetScore::in_size() const noexcept {
  return static_cast<int>(wavevectors_.size()) * 2 + shape_.time_features;
}

PeriodicNetScore::Layout PeriodicNetScore::layout() const noexcept {
  const std::size_t P = in_size(), W = shape_.width, d = domain_.dim();
  Layout L{};
  L.w1 = 0;
  L.b1 = L.w1 + W * P;
  L.w2 = L.b1 + W;
  L.b2 = L.w2 + W * W;
  L.w3 = L.b2 + W;
  L.b3 = L.w3 + d * W;
  L.total = L.b3 + d;
  return L;
}

void PeriodicNetScore::features(double t, const TorusPoint& x, std::vector<double>& z,
                                std::vector<double>* dz) const {
  const int F = shape_.fourier_order, d = domain_.dim();
  const double w = 2 * M_PI / domain_.radius();
  const std::size_t P = in_size(), K = wavevectors_.size();
  z.assign(P, 0.0);
  if (dz) dz->assign(2 * P, 0.0);
  // sin and cos of m * w * x_i for m = 0..F by angle addition.
  double sn[2][9], cs[2][9];
  for (int i = 0; i < d; ++i) {
    const double s1 = std::sin(w * x[i]), c1 = std::cos(w * x[i]);
    sn[i][0] = 0.0;
    cs[i][0] = 1.0;
    for (int m = 1; m <= F; ++m) {
      sn[i][m] = sn[i][m - 1] * c1 + cs[i][m - 1] * s1;
      cs[i][m] = cs[i][m - 1] * c1 - sn[i][m - 1] * s1;
    }
  }
  for (std::size_t j = 0; j < K; ++j) {
    const int a = wavevectors_[j][0], b = wavevectors_[j][1];
    double s = sn[0][a], c = cs[0][a];
    if (d == 2) {
      const double sb = b >= 0 ? sn[1][b] : -sn[1][-b], cb = cs[1][std::abs(b)];
      const double s2 = s * cb + c * sb, c2 = c * cb - s * sb;
      s = s2;
      c = c2;
    }
    z[2 * j] = s;
    z[2 * j + 1] = c;
    if (dz) {
      (*dz)[2 * j] = w * a * c;
      (*dz)[2 * j + 1] = -w * a * s;
      if (d == 2) {
        (*dz)[P + 2 * j] = w * b * c;
        (*dz)[P + 2 * j + 1] = -w * b * s;
      }
    }
  }
  if (shape_.time_features > 0) {
    const double tc = std::clamp(t, t_min_, horizon_);
    const double u = std::clamp(
        2.0 * std::log(tc / t_min_) / std::log(horizon_ / t_min_) - 1.0, -1.0, 1.0);
    double p0 = 1.0, p1 = u;
    for (int q = 0; q < shape_.time_features; ++q) {
      z[2 * K + q] = p1;
      const double p2 = 2 * u * p1 - p0;
      p0 = p1;
      p1 = p2;
    }
  }
}

void PeriodicNetScore::forward(double t, const TorusPoint& x, Forward& f, bool with_dx) const {
  const Layout L = layout();
  const std::size_t P = in_size(), W = shape_.width;
  const int d = domain_.dim();
  f.tc = std::clamp(t, t_min_, horizon_);
  features(t, x, f.z, with_dx ? &f.dz : nullptr);
  const double* th = theta_.data();
  f.h1.resize(W);
  for (std::size_t i = 0; i < W; ++i) {
    const double* row = th + L.w1 + i * P;
    double a = th[L.b1 + i];
    for (std::size_t k = 0; k < P; ++k) a += row[k] * f.z[k];
    f.h1[i] = std::tanh(a);
  }
  f.h2.resize(W);
  for (std::size_t i = 0; i < W; ++i) {
    const double* row = th + L.w2 + i * W;
    double a = th[L.b2 + i];
    for (std::size_t k = 0; k < W; ++k) a += row[k] * f.h1[k];
    f.h2[i] = std::tanh(a);
  }
  const double scale = 1.0 / std::sqrt(f.tc);
  f.out = {0.0, 0.0};
  for (int o = 0; o < d; ++o) {
    const double* row = th + L.w3 + o * W;
    double a = th[L.b3 + o];
    for (std::size_t k = 0; k < W; ++k) a += row[k] * f.h2[k];
    f.out[o] = a * scale;
  }
}

Vec PeriodicNetScore::evaluate(double t, const TorusPoint& x) const {
  thread_local Forward f;
  forward(t, x, f, false);
  return f.out;
}

Mat2 PeriodicNetScore::jacobian(double t, const TorusPoint& x) const {
  thread_local Forward f;
  forward(t, x, f, true);
  const Layout L = layout();
  const std::size_t P = in_size(), W = shape_.width;
  const int d = domain_.dim();
  const double* th = theta_.data();
  const double scale = 1.0 / std::sqrt(f.tc);
  thread_local std::vector<double> g1, g2;
  g1.resize(W);
  g2.resize(W);
  Mat2 J;
  for (int j = 0; j < d; ++j) {
    const double* dz = f.dz.data() + j * P;
    for (std::size_t i = 0; i < W; ++i) {
      const double* row = th + L.w1 + i * P;
      double a = 0.0;
      for (std::size_t k = 0; k < P; ++k) a += row[k] * dz[k];
      g1[i] = a * (1 - f.h1[i] * f.h1[i]);
    }
    for (std::size_t i = 0; i < W; ++i) {
      const double* row = th + L.w2 + i * W;
      double a = 0.0;
      for (std::size_t k = 0; k < W; ++k) a += row[k] * g1[k];
      g2[i] = a * (1 - f.h2[i] * f.h2[i]);
    }
    for (int o = 0; o < d; ++o) {
      const double* row = th + L.w3 + o * W;
      double a = 0.0;
      for (std::size_t k = 0; k < W; ++k) a += row[k] * g2[k];
      const double v = a * scale;
      if (o == 0 && j == 0) J.a00 = v;
      if (o == 0 && j == 1) J.a01 = v;
      if (o == 1 && j == 0) J.a10 = v;
      if (o == 1 && j == 1) J.a11 = v;
    }
  }
  return J;
}

double PeriodicNetScore::accumulate_loss(double t, const TorusPoint& x, const Vec& target,
                                         double weight, std::vector<double>& grad) const {
  thread_local Forward f;
  forward(t, x, f, false);
  const Layout L = layout();
  const std::size_t P = in_size(), W = shape_.width;
  const int d = domain_.dim();
  const double* th = theta_.data();
  double* g = grad.data();
  const double scale = 1.0 / std::sqrt(f.tc);
  double loss = 0.0;
  double dout[2] = {0.0, 0.0};
  for (int o = 0; o < d; ++o) {
    const double r = f.out[o] - target[o];
    loss += r * r;
    dout[o] = 2 * weight * r * scale;
  }
  thread_local std::vector<double> dh2, dh1;
  dh2.assign(W, 0.0);
  for (int o = 0; o < d; ++o) {
    const double* row = th + L.w3 + o * W;
    double* grow = g + L.w3 + o * W;
    for (std::size_t k = 0; k < W; ++k) {
      grow[k] += dout[o] * f.h2[k];
      dh2[k] += dout[o] * row[k];
    }
    g[L.b3 + o] += dout[o];
  }
  dh1.assign(W, 0.0);
  for (std::size_t i = 0; i < W; ++i) {
    const double da = dh2[i] * (1 - f.h2[i] * f.h2[i]);
    if (da == 0.0) continue;
    const double* row = th + L.w2 + i * W;
    double* grow = g + L.w2 + i * W;
    for (std::size_t k = 0; k < W; ++k) {
      grow[k] += da * f.h1[k];
      dh1[k] += da * row[k];
    }
    g[L.b2 + i] += da;
  }
  for (std::size_t i = 0; i < W; ++i) {
    const double da = dh1[i] * (1 - f.h1[i] * f.h1[i]);
    double* grow = g + L.w1 + i * P;
    for (std::size_t k = 0; k < P; ++k) grow[k] += da * f.z[k];
    g[L.b1 + i] += da;
  }
  return weight * loss;
}

ScoreField PeriodicNetScore::as_field() const {
  auto net = std::make_shared<const PeriodicNetScore>(*this);
  return ScoreField(
      domain_, horizon_, Provenance::trained,
      [net](double t, const TorusPoint& x) { return net->evaluate(t, x); },
      [net](double t, const TorusPoint& x) { return net->jacobian(t, x); },
      "net(F=" + std::to_string(shape_.fourier_order) + ",W=" + std::to_string(shape_.width) + ")");
}

namespace {
constexpr char kNetMagic[8] = {'T', 'S', 'G', 'M', 'N', 'E', 'T', '1'};

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(ErrorKind::io, "truncated network file");
  return v;
}
}  // namespace

void PeriodicNetScore::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot open " + path);
  out.write(kNetMagic, 8);
  put<std::int32_t>(out, shape_.fourier_order);
  put<std::int32_t>(out, shape_.width);
  put<std::int32_t>(out, domain_.dim());
  put<std::int32_t>(out, shape_.time_features);
  put<double>(out, domain_.radius());
  put<double>(out, horizon_);
  put<double>(out, t_min_);
  put<std::uint64_t>(out, theta_.size());
  out.write(reinterpret_cast<const char*>(theta_.data()),
            static_cast<std::streamsize>(theta_.size() * sizeof(double)));
  if (!out) fail(ErrorKind::io, "write failed: " + path);
}

PeriodicNetScore PeriodicNetScore::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kNetMagic, 8) != 0) fail(ErrorKind::io, "not a network file: " + path);
  NetShape shape;
  shape.fourier_order = get<std::int32_t>(in);
  shape.width = get<std::int32_t>(in);
  const int d = get<std::int32_t>(in);
  shape.time_features = get<std::int32_t>(in);
  const double R = get<double>(in), T = get<double>(in), tmin = get<double>(in);
  PeriodicNetScore net(TorusDomain(R, d), shape, tmin, T, 0);
  const auto count = get<std::uint64_t>(in);
  if (count != net.theta_.size()) fail(ErrorKind::io, "parameter count mismatch in " + path);
  in.read(reinterpret_cast<char*>(net.theta_.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) fail(ErrorKind::io, "truncated network file");
  return net;
}

// ---- training -------------------------------------------------------------------------

namespace {

struct Draw {
  double t, weight;
  TorusPoint x;
  Vec target;
};

// One antithetic pair (or a single draw) of the denoising regression problem.
int draw_pair(const TorusDomain& dom, const std::vector<TorusPoint>& sample, const TrainConfig& cfg,
              StreamRng& rng, Draw out[2]) {
  const int d = dom.dim();
  const auto j = std::min(static_cast<std::size_t>(rng.uniform() * sample.size()), sample.size() - 1);
  const double u = rng.uniform();
  double t, w;
  if (cfg.log_uniform_time) {
    const double lr = std::log(cfg.horizon / cfg.epsilon);
    t = cfg.epsilon * std::exp(u * lr);
    w = t * lr;
  } else {
    t = cfg.epsilon + u * (cfg.horizon - cfg.epsilon);
    w = cfg.horizon - cfg.epsilon;
  }
  Vec xi{0.0, 0.0};
  for (int i = 0; i < d; ++i) xi[i] = std::sqrt(2 * t) * rng.normal();
  const int count = cfg.antithetic ? 2 : 1;
  for (int p = 0; p < count; ++p) {
    const Vec step = p == 0 ? xi : -1.0 * xi;
    out[p].t = t;
    out[p].weight = w;
    out[p].x = wrap(dom, sample[j].coords + step);
    out[p].target = heat_kernel_score(dom, t, wrap(dom, step));
  }
  return count;
}

}  // namespace

TrainResult train_dsm(PeriodicNetScore& model, const std::vector<TorusPoint>& sample,
                      const TrainConfig& cfg) {
  if (!(cfg.epsilon > 0.0)) fail(ErrorKind::invalid_input, "epsilon must be positive");
  if (!(cfg.horizon > cfg.epsilon))
    fail(ErrorKind::invalid_input, "empty training window: epsilon must be < T");
  if (sample.empty()) fail(ErrorKind::invalid_input, "training sample is empty");
  if (cfg.steps < 1 || cfg.batch < 2) fail(ErrorKind::configuration, "steps >= 1 and batch >= 2 required");
  const TorusDomain& dom = model.domain();
  auto& theta = model.parameters();
  std::vector<double> grad(theta.size()), vel(theta.size(), 0.0);
  TrainResult res;
  res.trace.reserve(cfg.steps);
  Draw pair[2];
  for (int step = 0; step < cfg.steps; ++step) {
    StreamRng rng(cfg.seed, static_cast<std::uint64_t>(step));
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    int count = 0;
    while (count < cfg.batch) {
      const int m = draw_pair(dom, sample, cfg, rng, pair);
      for (int p = 0; p < m; ++p) loss += model.accumulate_loss(pair[p].t, pair[p].x, pair[p].target, pair[p].weight, grad);
      count += m;
    }
    loss /= count;
    if (!std::isfinite(loss) || loss > 1e6) {
      res.trace.push_back(loss);
      throw TrainingDiverged("DSM loss diverged at step " + std::to_string(step), res.trace);
    }
    res.trace.push_back(loss);
    double gn = 0.0;
    for (double& g : grad) {
      g /= count;
      gn += g * g;
    }
    gn = std::sqrt(gn);
    const double clip = cfg.clip_norm > 0.0 && gn > cfg.clip_norm ? cfg.clip_norm / gn : 1.0;
    const double decay = 0.5 * (1 + std::cos(M_PI * step / cfg.steps));
    const double lr = cfg.learning_rate * (cfg.final_lr_fraction + (1 - cfg.final_lr_fraction) * decay);
    for (std::size_t k = 0; k < theta.size(); ++k) {
      vel[k] = cfg.momentum * vel[k] - lr * clip * grad[k];
      theta[k] += vel[k];
    }
  }
  const std::size_t tail = std::max<std::size_t>(1, res.trace.size() / 10);
  res.smoothed_loss = std::accumulate(res.trace.end() - tail, res.trace.end(), 0.0) / tail;

  // Fresh estimate; antithetic pairs are averaged into one independent unit.
  std::vector<double> scratch(theta.size());
  double sum = 0.0, sum2 = 0.0;
  int units = 0;
  for (int i = 0; 2 * i < cfg.eval_samples || units < 2; ++i) {
    StreamRng rng(cfg.seed ^ 0x5eed5eed5eedULL, static_cast<std::uint64_t>(i) + (1ULL << 40));
    const int m = draw_pair(dom, sample, cfg, rng, pair);
    double v = 0.0;
    for (int p = 0; p < m; ++p) {
      const Vec s = model.evaluate(pair[p].t, pair[p].x);
      const Vec r = s - pair[p].target;
      v += pair[p].weight * dot(r, r);
    }
    v /= m;
    sum += v;
    sum2 += v * v;
    ++units;
  }
  res.final_loss = sum / units;
  res.final_se = std::sqrt(std::max(sum2 / units - res.final_loss * res.final_loss, 0.0) / (units - 1));
  return res;
}

void write_loss_csv(const std::string& path, const TrainResult& r) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot open " + path);
  out << "# final_loss=" << r.final_loss << " final_se=" << r.final_se << "\n";
  out << "step,loss\n";
  out.precision(17);
  for (std::size_t k = 0; k < r.trace.size(); ++k) out << k << ',' << r.trace[k] << '\n';
}

// ---- norm estimation --------------------------------------------------------------------

namespace {

struct Norms {
  double c0 = 0, c1 = 0, ct = 0, c2 = 0, c2x = 0;
};

std::vector<double> time_nodes(double lo, double hi, int m) {
  std::vector<double> t(m + 1);
  const bool geometric = lo > 0.0 && hi / lo > 10.0;
  for (int j = 0; j <= m; ++j)
    t[j] = geometric ? lo * std::pow(hi / lo, static_cast<double>(j) / m) : lo + (hi - lo) * j / m;
  t[m] = hi;
  return t;
}

Norms norms_on(const ScoreField& s, double lo, double hi, const GridSpec& grid, int m) {
  const TorusDomain& dom = s.domain();
  const int d = dom.dim(), n = grid.n();
  const double h = grid.spacing(dom);
  const GridFunction probe(dom, grid);
  const std::size_t N = probe.size();
  const auto t = time_nodes(lo, hi, m);
  std::vector<Vec> v(t.size() * N);
  for (std::size_t j = 0; j < t.size(); ++j)
    for (std::size_t k = 0; k < N; ++k) v[j * N + k] = s.evaluate(t[j], probe.node(k));
  auto at = [&](std::size_t j, int i0, int i1) -> const Vec& {
    i0 = (i0 % n + n) % n;
    i1 = d == 2 ? (i1 % n + n) % n : 0;
    return v[j * N + static_cast<std::size_t>(i0) * (d == 2 ? n : 1) + i1];
  };
  Norms r;
  auto upd = [](double& c, const Vec& a) { c = std::max(c, std::max(std::abs(a[0]), std::abs(a[1]))); };
  for (std::size_t j = 0; j < t.size(); ++j) {
    const bool interior = j > 0 && j + 1 < t.size();
    const double hm = interior ? t[j] - t[j - 1] : 0.0, hp = interior ? t[j + 1] - t[j] : 0.0;
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < (d == 2 ? n : 1); ++b) {
        const Vec& c = at(j, a, b);
        r.c0 = std::max(r.c0, std::sqrt(dot(c, c)));
        Mat2 J;
        const Vec dx = (1.0 / (2 * h)) * (at(j, a + 1, b) - at(j, a - 1, b));
        J.a00 = dx[0];
        J.a10 = dx[1];
        upd(r.c2x, (1.0 / (h * h)) * (at(j, a + 1, b) - 2.0 * c + at(j, a - 1, b)));
        if (d == 2) {
          const Vec dy = (1.0 / (2 * h)) * (at(j, a, b + 1) - at(j, a, b - 1));
          J.a01 = dy[0];
          J.a11 = dy[1];
          upd(r.c2x, (1.0 / (h * h)) * (at(j, a, b + 1) - 2.0 * c + at(j, a, b - 1)));
          upd(r.c2x, (1.0 / (4 * h * h)) * (at(j, a + 1, b + 1) - at(j, a + 1, b - 1) -
                                            at(j, a - 1, b + 1) + at(j, a - 1, b - 1)));
        }
        r.c1 = std::max(r.c1, op_norm(J));
        if (!interior) continue;
        const Vec& p = at(j + 1, a, b);
        const Vec& q = at(j - 1, a, b);
        upd(r.ct, (1.0 / (hm + hp)) * (p - q));
        upd(r.c2, (2.0 / (hm + hp)) * ((1.0 / hp) * (p - c) - (1.0 / hm) * (c - q)));
        upd(r.c2, (1.0 / (2 * h * (hm + hp))) *
                      (at(j + 1, a + 1, b) - at(j + 1, a - 1, b) - at(j - 1, a + 1, b) + at(j - 1, a - 1, b)));
        if (d == 2)
          upd(r.c2, (1.0 / (2 * h * (hm + hp))) * (at(j + 1, a, b + 1) - at(j + 1, a, b - 1) -
                                                   at(j - 1, a, b + 1) + at(j - 1, a, b - 1)));
      }
    }
  }
  r.c2 = std::max(r.c2, r.c2x);
  return r;
}

}  // namespace

CkNormEstimate estimate_norms(const ScoreField& s, double t_lo, double t_hi, const GridSpec& grid,
                              int time_samples) {
  if (!(t_lo >= 0.0 && t_hi >= t_lo && t_hi <= s.horizon() * (1 + 1e-12)))
    fail(ErrorKind::invalid_input, "norm window must lie in [0, T]");
  if (time_samples < 2) fail(ErrorKind::invalid_input, "need at least 2 time samples");
  const Norms a = norms_on(s, t_lo, t_hi, grid, time_samples);
  const Norms b = norms_on(s, t_lo, t_hi, GridSpec(2 * grid.n()), 2 * time_samples);
  CkNormEstimate e;
  e.c0 = b.c0;
  e.c1 = b.c1;
  e.ct = b.ct;
  e.c2 = b.c2;
  e.c2x = b.c2x;
  e.t_lo = t_lo;
  e.t_hi = t_hi;
  e.grid_n = 2 * grid.n();
  auto rel = [](double fine, double coarse) {
    const double m = std::max(std::abs(fine), std::abs(coarse));
    return m > 1e-300 ? std::abs(fine - coarse) / m : 0.0;
  };
  e.uncertainty = std::max({rel(b.c0, a.c0), rel(b.c1, a.c1), rel(b.ct, a.ct), rel(b.c2, a.c2), rel(b.c2x, a.c2x)});
  e.unstable = e.uncertainty > 0.5;
  return e;
}

}  // namespace tsgm
