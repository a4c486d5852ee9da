#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tsgm/distributions.hpp"
#include "tsgm/score.hpp"

namespace tsgm {

/// Euler-Maruyama settings. The noise coefficient is fixed at sqrt(2).
struct SdeConfig {
  double horizon = 1.0;     ///< T
  double dt = 1e-3;
  std::size_t particles = 1000;
  std::uint64_t seed = 0;
  int workers = 1;          ///< threads over particles; output does not depend on it
  int record_every = 0;     ///< store every k-th step as well as the end; 0 stores the end only
  bool wrap_each_step = true;

  /// Number of steps T / dt; throws configuration if dt does not divide T within 1e-12.
  int steps() const;
  void validate() const;
};

/// Snapshots of an ensemble, always ending at the final time.
struct SdePath {
  std::vector<ParticleEnsemble> snapshots;
  const ParticleEnsemble& final() const { return snapshots.back(); }
};

/// dY = sqrt(2) dW with Y(0) ~ pi.
SdePath simulate_forward(const TargetDistribution& pi, const SdeConfig& cfg);

/// dX = 2 s(T - t, X) dt + sqrt(2) dW for t in [0, T - stop]. The drift at step k
/// uses s(T - t_k, .). When `stop` does not land on the step grid the final step
/// is shortened.
SdePath simulate_reverse(const ScoreField& score, const SdeConfig& cfg,
                         const TargetDistribution& initial, double stop = 0.0);
SdePath simulate_reverse(const ScoreField& score, const SdeConfig& cfg);
/// Starts from the given points (e.g. a forward ensemble at time T).
SdePath simulate_reverse(const ScoreField& score, const SdeConfig& cfg,
                         const std::vector<TorusPoint>& initial, double stop = 0.0);

/// Kolmogorov-Smirnov distance of one coordinate against a continuous CDF on [0, R).
double ks_statistic(const std::vector<TorusPoint>& points, int axis,
                    const std::function<double(double)>& cdf);
/// Critical value at level 1%: 1.628 / sqrt(n) (asymptotic).
double ks_critical_1pct(std::size_t n);

/// n^(1/3) rounded to the nearest power of two, at least 8.
int histogram_bins(std::size_t n);
/// Normalised histogram on a bins^d grid (counts / (n h^d)).
GridDensity histogram(const ParticleEnsemble& e, int bins);

/// One row per particle, header "# seed=.. dt=.. T=.. R=.. d=.. t=..".
void write_ensemble_csv(const std::string& path, const ParticleEnsemble& e, const SdeConfig& cfg);

}  // namespace tsgm
