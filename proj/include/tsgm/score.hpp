#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "tsgm/distributions.hpp"
#include "tsgm/pde.hpp"

namespace tsgm {

enum class Provenance { exact, perturbed, trained, tabulated };
const char* to_string(Provenance p);

/// Vector field s(t, x) on [0, T] x domain, where t is the noising time.
class ScoreField {
 public:
  using Fn = std::function<Vec(double, const TorusPoint&)>;
  using JacobianFn = std::function<Mat2(double, const TorusPoint&)>;

  ScoreField(TorusDomain domain, double horizon, Provenance provenance, Fn s,
             JacobianFn jacobian = {}, std::string name = "score");

  /// grad log eta(t) of a heat flow.
  static ScoreField exact(const HeatFlowLaw& flow, double horizon);
  static ScoreField zero(const TorusDomain& domain, double horizon);

  const TorusDomain& domain() const noexcept { return domain_; }
  double horizon() const noexcept { return horizon_; }
  Provenance provenance() const noexcept { return provenance_; }
  const std::string& name() const noexcept { return name_; }
  bool has_jacobian() const noexcept { return static_cast<bool>(jac_); }

  /// Throws invalid_input when t is outside [0, T].
  Vec evaluate(double t, const TorusPoint& x) const;
  Vec operator()(double t, const TorusPoint& x) const { return evaluate(t, x); }
  /// Analytic when available, otherwise central differences with step 1e-5 R.
  Mat2 jacobian(double t, const TorusPoint& x) const;
  double divergence(double t, const TorusPoint& x) const;

  /// Generative drift in the Fokker-Planck convention of pde.hpp:
  /// b(t, x) = -2 s(T - t, x), so that dX = 2 s(T - t, X) dt + sqrt(2) dW.
  DriftField reverse_drift() const;

 private:
  void check_time(double t) const;

  TorusDomain domain_;
  double horizon_;
  Provenance provenance_;
  Fn s_;
  JacobianFn jac_;
  std::string name_;
};

/// Bounded direction field for controlled perturbations.
struct Direction {
  ScoreField::Fn g;
  ScoreField::JacobianFn jacobian;  ///< optional
  std::string name = "direction";

  /// g = e_axis everywhere, |g| = 1.
  static Direction constant(int axis = 0);
  /// g = (sin(2 pi k x / R + phase), 0) in d = 1; the same on each axis in d = 2.
  static Direction mode(const TorusDomain& domain, int k, double phase = 0.0);
};

struct PerturbedScore {
  ScoreField field;
  double magnitude;   ///< delta_p
  double g_scale;     ///< factor applied to the raw direction so that sup |g| <= 1
};

/// s = base + delta_p g with g rescaled so that its sampled sup norm is at most one.
PerturbedScore perturb(const ScoreField& base, const Direction& g, double delta_p);

/// Node values of each component on `times`, interpolated linearly in time and
/// (bi)linearly in space. Node evaluations reproduce the tabulated values.
ScoreField tabulate(const ScoreField& s, const GridSpec& grid, std::vector<double> times);

// ---- periodic network -----------------------------------------------------

struct NetShape {
  int fourier_order = 6;     ///< F
  int width = 32;            ///< W
  int time_features = 6;     ///< Chebyshev polynomials of the log-time coordinate
};

/// Two tanh hidden layers on Fourier features of x and a log-time embedding.
/// The output is divided by sqrt(max(t, t_min)) so its natural scale is O(1).
class PeriodicNetScore {
 public:
  PeriodicNetScore(TorusDomain domain, NetShape shape, double t_min, double horizon,
                   std::uint64_t seed);

  const TorusDomain& domain() const noexcept { return domain_; }
  const NetShape& shape() const noexcept { return shape_; }
  double t_min() const noexcept { return t_min_; }
  double horizon() const noexcept { return horizon_; }
  std::size_t parameter_count() const noexcept { return theta_.size(); }
  std::vector<double>& parameters() noexcept { return theta_; }
  const std::vector<double>& parameters() const noexcept { return theta_; }
  std::size_t spatial_features() const noexcept { return wavevectors_.size() * 2; }

  Vec evaluate(double t, const TorusPoint& x) const;
  Mat2 jacobian(double t, const TorusPoint& x) const;
  /// Returns w |s - target|^2 and adds its parameter gradient to `grad`.
  double accumulate_loss(double t, const TorusPoint& x, const Vec& target, double weight,
                         std::vector<double>& grad) const;

  /// A ScoreField sharing this network (copied).
  ScoreField as_field() const;

  void save(const std::string& path) const;
  static PeriodicNetScore load(const std::string& path);

 private:
  struct Layout {
    std::size_t w1, b1, w2, b2, w3, b3, total;
  };
  struct Forward;
  int in_size() const noexcept;
  Layout layout() const noexcept;
  void features(double t, const TorusPoint& x, std::vector<double>& z,
                std::vector<double>* dz) const;
  void forward(double t, const TorusPoint& x, Forward& f, bool with_dx) const;

  TorusDomain domain_;
  NetShape shape_;
  double t_min_, horizon_;
  std::vector<std::array<int, 2>> wavevectors_;
  std::vector<double> theta_;
};

struct TrainConfig {
  double epsilon = 0.01;   ///< lower end of the time window
  double horizon = 1.0;    ///< T
  int steps = 2000;
  int batch = 128;         ///< antithetic pairs count as two samples
  double learning_rate = 0.02;
  double momentum = 0.9;
  double final_lr_fraction = 0.02;  ///< cosine decay floor
  double clip_norm = 10.0;          ///< gradient norm clip, 0 disables
  bool log_uniform_time = true;     ///< importance weights keep the objective uniform in time
  bool antithetic = true;
  std::uint64_t seed = 1;
  int eval_samples = 20000;         ///< final Monte Carlo loss estimate
};

/// Thrown when the minibatch loss exceeds 1e6 or turns non-finite.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::vector<double> trace)
      : Error(ErrorKind::training_diverged, what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const noexcept { return trace_; }

 private:
  std::vector<double> trace_;
};

struct TrainResult {
  std::vector<double> trace;  ///< minibatch DSM estimate per step
  double final_loss = 0.0;    ///< fresh Monte Carlo DSM estimate at the final parameters
  double final_se = 0.0;
  double smoothed_loss = 0.0; ///< mean of the last 10% of the trace
};

/// Minimises the denoising objective (1/N) sum_j int_eps^T E|s - grad log Gamma(t)(x - z_j)|^2 dt
/// by momentum gradient descent with cosine decay.
TrainResult train_dsm(PeriodicNetScore& model, const std::vector<TorusPoint>& sample,
                      const TrainConfig& cfg);

void write_loss_csv(const std::string& path, const TrainResult& r);

// ---- norms ------------------------------------------------------------------

struct CkNormEstimate {
  double c0 = 0.0;  ///< sup |s|
  double c1 = 0.0;  ///< sup |grad_x s| (operator 2-norm)
  double ct = 0.0;  ///< sup |d_t s| (componentwise max)
  double c2 = 0.0;  ///< max over second differences in (t, x), mixed ones included
  double c2x = 0.0; ///< max over second differences in x only
  double t_lo = 0.0, t_hi = 0.0;
  int grid_n = 0;
  double uncertainty = 0.0;  ///< max relative change of c0, c1, c2 under refinement
  bool unstable = false;     ///< some component changed by more than 50%

  /// ||s||_{C^2} = c0 + c1 + ct + c2
  double c2_norm() const { return c0 + c1 + ct + c2; }
  /// sup over t of the spatial C^2 norm: c0 + c1 + c2x
  double c2_space_norm() const { return c0 + c1 + c2x; }
};

/// Central differences on a (time x space) grid over [t_lo, t_hi], then the same
/// with both resolutions doubled.
CkNormEstimate estimate_norms(const ScoreField& s, double t_lo, double t_hi, const GridSpec& grid,
                              int time_samples = 16);

}  // namespace tsgm
