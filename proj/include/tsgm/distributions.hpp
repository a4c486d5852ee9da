#pragma once

#include <memory>
#include <random>
#include <variant>
#include <vector>

#include "tsgm/heat_kernel.hpp"
#include "tsgm/rng.hpp"
#include "tsgm/torus.hpp"

namespace tsgm {

/// Symmetric 2x2 matrix stored as {xx, xy, yy}.
struct Sym2 {
  double xx = 0.0, xy = 0.0, yy = 0.0;
};

struct WrappedGaussianMixture {
  std::vector<double> weights;
  std::vector<TorusPoint> means;
  std::vector<double> variances;  ///< per-axis variance of each component
};

struct Empirical {
  std::vector<TorusPoint> points;
};

struct Uniform {};

struct GridTabulated {
  std::shared_ptr<const GridDensity> density;
};

class TargetDistribution {
 public:
  using Variant = std::variant<WrappedGaussianMixture, Empirical, Uniform, GridTabulated>;

  static TargetDistribution mixture(const TorusDomain& domain, std::vector<double> weights,
                                    std::vector<TorusPoint> means, std::vector<double> variances);
  static TargetDistribution empirical(const TorusDomain& domain, std::vector<TorusPoint> points);
  static TargetDistribution uniform(const TorusDomain& domain);
  static TargetDistribution tabulated(GridDensity density);

  const TorusDomain& domain() const noexcept { return domain_; }
  const Variant& variant() const noexcept { return variant_; }
  bool has_density() const noexcept { return !std::holds_alternative<Empirical>(variant_); }
  bool is_uniform() const noexcept { return std::holds_alternative<Uniform>(variant_); }
  const char* kind_name() const noexcept;

  std::vector<TorusPoint> sample(std::size_t count, std::uint64_t seed) const;
  /// Single draw from stream `rng`.
  TorusPoint draw(StreamRng& rng) const;

 private:
  TargetDistribution(TorusDomain domain, Variant v);

  TorusDomain domain_;
  Variant variant_;
  // Cumulative masses for tabulated sampling.
  std::shared_ptr<const std::vector<double>> cdf_;
};

/// Log-density value with first and second log-derivatives at one point.
struct FlowEval {
  double log_density = 0.0;
  Vec score{0.0, 0.0};
  Sym2 log_hessian;
};

/// Heat flow eta(s) = Gamma(s + offset) * base.
class HeatFlowLaw {
 public:
  explicit HeatFlowLaw(TargetDistribution base, double time_offset = 0.0);

  const TargetDistribution& base() const noexcept { return base_; }
  const TorusDomain& domain() const noexcept { return base_.domain(); }
  double time_offset() const noexcept { return offset_; }
  /// Whether eta(s) exists for s = 0.
  bool density_at_zero() const noexcept { return base_.has_density() || offset_ > 0.0; }

  FlowEval evaluate(double s, const TorusPoint& x) const;
  double density(double s, const TorusPoint& x) const;
  Vec score(double s, const TorusPoint& x) const;
  GridDensity on_grid(double s, const GridSpec& grid) const;

 private:
  TargetDistribution base_;
  double offset_;
  std::shared_ptr<const Spectral> spectral_;
  std::shared_ptr<const Spectral::Coeffs> coeffs_;
};

double flow_density(const TargetDistribution& dist, double s, const TorusPoint& x);
Vec flow_score(const TargetDistribution& dist, double s, const TorusPoint& x);

struct MollifiedEmpirical {
  Empirical sample;
  double epsilon;
  HeatFlowLaw flow;     ///< eta^{N,eps}(s) = pi^N * Gamma(eps + s)
  GridDensity density;  ///< pi^{N,eps} on the finer of the two grids used for delta
  double delta;         ///< grid minimum of the mollified density
  int delta_grid_n;     ///< node count of the grid that attained delta
};

/// Grid used by mollify: h <= sqrt(2 eps) / 8, clamped to [256, 8192] (d = 1) or [64, 512] (d = 2).
GridSpec mollify_grid(const TorusDomain& domain, double epsilon);
MollifiedEmpirical mollify(const TargetDistribution& sample, double epsilon);
MollifiedEmpirical mollify(const TargetDistribution& sample, double epsilon, const GridSpec& grid);

/// Quadrature of m log m with 0 log 0 = 0.
double entropy(const GridDensity& m);

}  // namespace tsgm
