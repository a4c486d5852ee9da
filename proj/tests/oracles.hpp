#pragma once

// Independent reference computations used only by tests. Nothing here calls
// into the library paths it is used to check.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace oracle {

/// Direct wrapped-Gaussian image sum of the 1-d periodic heat kernel.
inline double image_kernel(double R, double t, double x, int K = 50) {
  double s = 0.0;
  for (int k = -K; k <= K; ++k) {
    const double y = x - k * R;
    s += std::exp(-y * y / (4.0 * t));
  }
  return s / std::sqrt(4.0 * M_PI * t);
}

inline double image_kernel_dx(double R, double t, double x, int K = 50) {
  double s = 0.0;
  for (int k = -K; k <= K; ++k) {
    const double y = x - k * R;
    s += -y / (2.0 * t) * std::exp(-y * y / (4.0 * t));
  }
  return s / std::sqrt(4.0 * M_PI * t);
}

/// Trapezoid sum of a periodic function on n nodes.
template <class F>
double periodic_quadrature(double R, int n, F&& f) {
  double s = 0.0;
  const double h = R / n;
  for (int i = 0; i < n; ++i) s += f(i * h);
  return s * h;
}

/// Exhaustive optimal matching cost between equal-size point sets on a circle.
inline double brute_force_matching(const std::vector<double>& a, const std::vector<double>& b,
                                   double R) {
  std::vector<int> perm(b.size());
  std::iota(perm.begin(), perm.end(), 0);
  double best = 1e300;
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      double d = std::fabs(a[i] - b[perm[i]]);
      c += std::min(d, R - d);
    }
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(a.size());
}

inline double slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

/// Circle W1 from samples of F - G on a uniform grid of [0, R): the integral
/// of |F - G - c| with c the median of the samples.
inline double circle_w1_from_cdf_gap(std::vector<double> gap, double R) {
  std::vector<double> sorted = gap;
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
  const double c = sorted[sorted.size() / 2];
  double s = 0.0;
  for (double g : gap) s += std::fabs(g - c);
  return s * R / static_cast<double>(gap.size());
}

/// CDF on [0, R) of a wrapped centred normal with variance v and mean mu.
inline double wrapped_normal_cdf(double x, double mu, double v, double R) {
  const double sd = std::sqrt(v);
  auto Phi = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
  double s = 0.0;
  for (int k = -20; k <= 20; ++k) s += Phi((x - mu + k * R) / sd) - Phi((-mu + k * R) / sd);
  return s;
}

}  // namespace oracle
