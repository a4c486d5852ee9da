#pragma once

#include <span>

#include "tsgm/spectral.hpp"
#include "tsgm/torus.hpp"

namespace tsgm {

/// Evaluation controls for the periodic heat kernel of the generator Laplacian
/// (variance 2t per axis).
struct HeatKernelConfig {
  int image_truncation = 10;   ///< max lattice images per side in the wrapped sum
  int spectral_cutoff = 128;   ///< max Fourier modes per axis
  double crossover_time = -1;  ///< negative selects R^2 / (4 pi)

  double crossover(const TorusDomain& domain) const;
};

/// log of the one-dimensional periodic kernel and its first two log-derivatives.
struct KernelLog1D {
  double log_value;
  double dlog;   ///< g'/g
  double d2rel;  ///< g''/g
};

KernelLog1D heat_kernel_log_1d(double radius, double t, double x, const HeatKernelConfig& cfg = {});

double heat_kernel(const TorusDomain& domain, double t, const TorusPoint& x,
                   const HeatKernelConfig& cfg = {});
double log_heat_kernel(const TorusDomain& domain, double t, const TorusPoint& x,
                       const HeatKernelConfig& cfg = {});
Vec heat_kernel_grad(const TorusDomain& domain, double t, const TorusPoint& x,
                     const HeatKernelConfig& cfg = {});
/// grad log of the kernel; the denoising regression target.
Vec heat_kernel_score(const TorusDomain& domain, double t, const TorusPoint& x,
                      const HeatKernelConfig& cfg = {});

/// Gamma(t) * m via spectral multiplication. t = 0 returns m.
GridDensity convolve_heat(const GridDensity& m, double t);
GridDensity convolve_heat(const GridDensity& m, double t, const Spectral& spectral);
/// Weighted sum of kernels centred at `points`; rejects t = 0 (no grid density).
GridDensity convolve_heat(std::span<const TorusPoint> points, std::span<const double> weights,
                          const TorusDomain& domain, const GridSpec& grid, double t,
                          const HeatKernelConfig& cfg = {});

}  // namespace tsgm
