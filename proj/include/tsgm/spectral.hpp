#pragma once

#include <complex>
#include <vector>

#include "tsgm/torus.hpp"

namespace tsgm {

/// FFT-backed operators on a periodic grid: heat propagation, differentiation,
/// trigonometric interpolation. Thread-safe after construction.
class Spectral {
 public:
  using Coeffs = std::vector<std::complex<double>>;

  Spectral(const TorusDomain& domain, const GridSpec& grid);

  const TorusDomain& domain() const noexcept { return domain_; }
  const GridSpec& grid() const noexcept { return grid_; }

  Coeffs forward(std::span<const double> values) const;
  /// Inverse including the 1/n^d normalisation.
  std::vector<double> inverse(Coeffs coeffs) const;

  /// Multiplies each mode by mult(kx, ky), with k the angular wavenumber 2 pi m / R.
  template <class F>
  void apply(Coeffs& c, F&& mult) const {
    const int n = grid_.n();
    const int half = n / 2 + 1;
    const double w = 2.0 * 3.14159265358979323846 / domain_.radius();
    if (domain_.dim() == 1) {
      for (int m = 0; m < half; ++m) c[m] *= mult(w * m, 0.0, m == n / 2, false);
    } else {
      for (int i = 0; i < n; ++i) {
        const int mi = i <= n / 2 ? i : i - n;
        for (int j = 0; j < half; ++j)
          c[static_cast<std::size_t>(i) * half + j] *=
              mult(w * mi, w * j, i == n / 2, j == n / 2);
      }
    }
  }

  GridFunction heat(const GridFunction& f, double t) const;
  GridFunction derivative(const GridFunction& f, int axis) const;
  /// Heat step followed by derivative, sharing one transform pair.
  GridFunction heat_derivative(const GridFunction& f, double t, int axis) const;
  double interpolate(const Coeffs& coeffs, const TorusPoint& x) const;

 private:
  TorusDomain domain_;
  GridSpec grid_;
};

}  // namespace tsgm
