#include "tsgm/heat_kernel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace tsgm {
namespace {

void require_positive_time(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) fail(ErrorKind::invalid_input, "heat kernel needs t > 0");
}

// Images whose exponent trails the nearest one by more than this are below
// double precision relative to the sum.
constexpr double kImageCutoff = 45.0;

KernelLog1D image_sum(double R, double t, double x, int max_images) {
  // x in [-R/2, R/2]
  const double inv4t = 1.0 / (4.0 * t);
  const double e0 = x * x * inv4t;
  double s0 = 1.0, s1 = -x / (2.0 * t), s2 = x * x / (4.0 * t * t) - 1.0 / (2.0 * t);
  for (int k = 1; k <= max_images; ++k) {
    const double gap = (k - 0.5) * R;
    if (gap * gap * inv4t - e0 > kImageCutoff) break;
    for (int sgn = -1; sgn <= 1; sgn += 2) {
      const double y = x - sgn * k * R;
      const double w = std::exp(e0 - y * y * inv4t);
      s0 += w;
      s1 += w * (-y / (2.0 * t));
      s2 += w * (y * y / (4.0 * t * t) - 1.0 / (2.0 * t));
    }
  }
  return {std::log(s0) - e0 - 0.5 * std::log(4.0 * M_PI * t), s1 / s0, s2 / s0};
}

KernelLog1D fourier_sum(double R, double t, double x, int cutoff) {
  const double w = 2.0 * M_PI / R;
  double g = 1.0, g1 = 0.0, g2 = 0.0;
  for (int m = 1; m <= cutoff; ++m) {
    const double k = w * m;
    const double a = std::exp(-k * k * t);
    if (a < 1e-18) break;
    const double c = std::cos(k * x), s = std::sin(k * x);
    g += 2.0 * a * c;
    g1 -= 2.0 * a * k * s;
    g2 -= 2.0 * a * k * k * c;
  }
  return {std::log(g / R), g1 / g, g2 / g};
}

double centred(double x, double R) {
  double y = std::fmod(x, R);
  if (y > 0.5 * R) y -= R;
  if (y < -0.5 * R) y += R;
  return y;
}

}  // namespace

double HeatKernelConfig::crossover(const TorusDomain& domain) const {
  if (crossover_time > 0.0) return crossover_time;
  return domain.radius() * domain.radius() / (4.0 * M_PI);
}

KernelLog1D heat_kernel_log_1d(double radius, double t, double x, const HeatKernelConfig& cfg) {
  require_positive_time(t);
  const double y = centred(x, radius);
  const double tstar = cfg.crossover_time > 0.0 ? cfg.crossover_time
                                                : radius * radius / (4.0 * M_PI);
  return t < tstar ? image_sum(radius, t, y, cfg.image_truncation)
                   : fourier_sum(radius, t, y, cfg.spectral_cutoff);
}

double log_heat_kernel(const TorusDomain& domain, double t, const TorusPoint& x,
                       const HeatKernelConfig& cfg) {
  double v = 0.0;
  for (int i = 0; i < domain.dim(); ++i)
    v += heat_kernel_log_1d(domain.radius(), t, x[i], cfg).log_value;
  return v;
}

double heat_kernel(const TorusDomain& domain, double t, const TorusPoint& x,
                   const HeatKernelConfig& cfg) {
  return std::exp(log_heat_kernel(domain, t, x, cfg));
}

Vec heat_kernel_score(const TorusDomain& domain, double t, const TorusPoint& x,
                      const HeatKernelConfig& cfg) {
  Vec s{0.0, 0.0};
  for (int i = 0; i < domain.dim(); ++i) s[i] = heat_kernel_log_1d(domain.radius(), t, x[i], cfg).dlog;
  return s;
}

Vec heat_kernel_grad(const TorusDomain& domain, double t, const TorusPoint& x,
                     const HeatKernelConfig& cfg) {
  double logv = 0.0;
  Vec s{0.0, 0.0};
  for (int i = 0; i < domain.dim(); ++i) {
    const auto k = heat_kernel_log_1d(domain.radius(), t, x[i], cfg);
    logv += k.log_value;
    s[i] = k.dlog;
  }
  return std::exp(logv) * s;
}

GridDensity convolve_heat(const GridDensity& m, double t) {
  return convolve_heat(m, t, Spectral(m.domain(), m.grid()));
}

GridDensity convolve_heat(const GridDensity& m, double t, const Spectral& spectral) {
  if (t < 0.0) fail(ErrorKind::invalid_input, "heat convolution needs t >= 0");
  if (t == 0.0) return m;
  return GridDensity::normalized(spectral.heat(m.function(), t));
}

GridDensity convolve_heat(std::span<const TorusPoint> points, std::span<const double> weights,
                          const TorusDomain& domain, const GridSpec& grid, double t,
                          const HeatKernelConfig& cfg) {
  if (t == 0.0) fail(ErrorKind::no_density, "point masses have no grid density at t = 0");
  require_positive_time(t);
  if (points.size() != weights.size() || points.empty())
    fail(ErrorKind::invalid_input, "point masses need matching nonempty weights");
  GridFunction f(domain, grid);
  const double R = domain.radius();
  const double h = grid.spacing(domain);
  const int n = grid.n();
  // Separable: tabulate 1-d log kernels per point and axis.
  std::vector<double> k0(n), k1(n);
  for (std::size_t j = 0; j < points.size(); ++j) {
    for (int i = 0; i < n; ++i) {
      k0[i] = std::exp(heat_kernel_log_1d(R, t, i * h - points[j][0], cfg).log_value);
      if (domain.dim() == 2)
        k1[i] = std::exp(heat_kernel_log_1d(R, t, i * h - points[j][1], cfg).log_value);
    }
    if (domain.dim() == 1) {
      for (int i = 0; i < n; ++i) f[i] += weights[j] * k0[i];
    } else {
      for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
          f[static_cast<std::size_t>(a) * n + b] += weights[j] * k0[a] * k1[b];
    }
  }
  // Quadrature of a smooth kernel is exact to rounding once resolved; the
  // renormalisation only absorbs under-resolution of very narrow kernels.
  return GridDensity::normalized(std::move(f));
}

}  // namespace tsgm
