#include "tsgm/spectral.hpp"

#include <fftw3.h>

#include <cmath>
#include <map>
#include <mutex>
#include <utility>

namespace tsgm {
namespace {

struct Plans {
  fftw_plan forward;
  fftw_plan backward;
};

// FFTW's planner is not thread-safe; execution with the new-array interface is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

const Plans& plans_for(int dim, int n) {
  static std::map<std::pair<int, int>, Plans> cache;
  std::lock_guard<std::mutex> lock(planner_mutex());
  auto it = cache.find({dim, n});
  if (it != cache.end()) return it->second;
  const std::size_t real_size = dim == 1 ? n : static_cast<std::size_t>(n) * n;
  const std::size_t cplx_size = dim == 1 ? n / 2 + 1 : static_cast<std::size_t>(n) * (n / 2 + 1);
  double* r = fftw_alloc_real(real_size);
  fftw_complex* c = fftw_alloc_complex(cplx_size);
  const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
  Plans p{};
  if (dim == 1) {
    p.forward = fftw_plan_dft_r2c_1d(n, r, c, flags);
    p.backward = fftw_plan_dft_c2r_1d(n, c, r, flags);
  } else {
    p.forward = fftw_plan_dft_r2c_2d(n, n, r, c, flags);
    p.backward = fftw_plan_dft_c2r_2d(n, n, c, r, flags);
  }
  fftw_free(r);
  fftw_free(c);
  return cache.emplace(std::make_pair(dim, n), p).first->second;
}

}  // namespace

Spectral::Spectral(const TorusDomain& domain, const GridSpec& grid) : domain_(domain), grid_(grid) {
  plans_for(domain.dim(), grid.n());
}

Spectral::Coeffs Spectral::forward(std::span<const double> values) const {
  const int n = grid_.n();
  const std::size_t cs = domain_.dim() == 1 ? n / 2 + 1 : static_cast<std::size_t>(n) * (n / 2 + 1);
  if (values.size() != grid_.size(domain_))
    fail(ErrorKind::domain_mismatch, "spectral transform size mismatch");
  Coeffs out(cs);
  std::vector<double> in(values.begin(), values.end());  // r2c may clobber input
  fftw_execute_dft_r2c(plans_for(domain_.dim(), n).forward, in.data(),
                       reinterpret_cast<fftw_complex*>(out.data()));
  return out;
}

std::vector<double> Spectral::inverse(Coeffs coeffs) const {
  const int n = grid_.n();
  std::vector<double> out(grid_.size(domain_));
  fftw_execute_dft_c2r(plans_for(domain_.dim(), n).backward,
                       reinterpret_cast<fftw_complex*>(coeffs.data()), out.data());
  const double scale = 1.0 / static_cast<double>(out.size());
  for (auto& v : out) v *= scale;
  return out;
}

GridFunction Spectral::heat(const GridFunction& f, double t) const {
  if (t == 0.0) return f;
  auto c = forward(f.values());
  apply(c, [t](double kx, double ky, bool, bool) { return std::exp(-(kx * kx + ky * ky) * t); });
  return GridFunction(domain_, grid_, inverse(std::move(c)));
}

GridFunction Spectral::derivative(const GridFunction& f, int axis) const {
  return heat_derivative(f, 0.0, axis);
}

GridFunction Spectral::heat_derivative(const GridFunction& f, double t, int axis) const {
  auto c = forward(f.values());
  apply(c, [t, axis](double kx, double ky, bool nyq_x, bool nyq_y) -> std::complex<double> {
    const double damp = t > 0.0 ? std::exp(-(kx * kx + ky * ky) * t) : 1.0;
    if (axis == 0) return nyq_x ? 0.0 : std::complex<double>(0.0, kx * damp);
    return nyq_y ? 0.0 : std::complex<double>(0.0, ky * damp);
  });
  return GridFunction(domain_, grid_, inverse(std::move(c)));
}

double Spectral::interpolate(const Coeffs& coeffs, const TorusPoint& x) const {
  const int n = grid_.n();
  const int half = n / 2 + 1;
  const double w = 2.0 * M_PI / domain_.radius();
  double sum = 0.0;
  if (domain_.dim() == 1) {
    for (int m = 0; m < half; ++m) {
      // Interior modes appear twice in the full spectrum.
      const double mult = (m == 0 || m == n / 2) ? 1.0 : 2.0;
      const double ph = w * m * x[0];
      sum += mult * (coeffs[m].real() * std::cos(ph) - coeffs[m].imag() * std::sin(ph));
    }
    return sum / n;
  }
  for (int i = 0; i < n; ++i) {
    const int mi = i <= n / 2 ? i : i - n;
    for (int j = 0; j < half; ++j) {
      const double mult = (j == 0 || j == n / 2) ? 1.0 : 2.0;
      const double ph = w * (mi * x[0] + j * x[1]);
      const auto& c = coeffs[static_cast<std::size_t>(i) * half + j];
      sum += mult * (c.real() * std::cos(ph) - c.imag() * std::sin(ph));
    }
  }
  return sum / (static_cast<double>(n) * n);
}

}  // namespace tsgm
