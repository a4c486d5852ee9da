#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tsgm/torus.hpp"

namespace tsgm {

/// Row-major 2x2 matrix, J(i, j) = d b_i / d x_j.
struct Mat2 {
  double a00 = 0.0, a01 = 0.0, a10 = 0.0, a11 = 0.0;
};

/// Time-dependent vector field b(t, x) on the torus.
class DriftField {
 public:
  using Fn = std::function<Vec(double, const TorusPoint&)>;
  using JacobianFn = std::function<Mat2(double, const TorusPoint&)>;

  DriftField(TorusDomain domain, Fn b, JacobianFn jacobian = {}, std::string name = "drift");
  static DriftField zero(const TorusDomain& domain);

  const TorusDomain& domain() const noexcept { return domain_; }
  const std::string& name() const noexcept { return name_; }
  bool has_jacobian() const noexcept { return static_cast<bool>(jac_); }

  Vec operator()(double t, const TorusPoint& x) const { return b_(t, x); }
  /// Analytic Jacobian when supplied, otherwise central differences.
  Mat2 jacobian(double t, const TorusPoint& x) const;

 private:
  TorusDomain domain_;
  Fn b_;
  JacobianFn jac_;
  std::string name_;
};

/// A sup-norm estimate from one grid and its refinement.
struct NormEstimate {
  double value = 0.0;        ///< estimate on the refined grid
  double uncertainty = 0.0;  ///< |refined - coarse|
  int grid_n = 0;            ///< refined grid nodes per axis
};

/// sup over [0, T] x grid of |b|, sampled at `time_samples` + 1 evenly spaced times.
double drift_sup(const DriftField& b, double horizon, const GridSpec& grid, int time_samples = 16);

/// ||grad b||_inf (operator 2-norm) from central differences of b sampled on
/// `grid` and on the grid refined once.
NormEstimate grad_sup_estimate(const DriftField& b, double horizon, const GridSpec& grid,
                               int time_samples = 16);

/// Solution values on (records) x (grid nodes), slice k at time times[k].
class SpaceTimeField {
 public:
  SpaceTimeField(TorusDomain domain, GridSpec grid, double horizon);

  const TorusDomain& domain() const noexcept { return domain_; }
  const GridSpec& grid() const noexcept { return grid_; }
  double horizon() const noexcept { return horizon_; }
  std::size_t slices() const noexcept { return times_.size(); }
  std::size_t nodes() const noexcept { return grid_.size(domain_); }
  double time(std::size_t k) const { return times_.at(k); }
  const std::vector<double>& times() const noexcept { return times_; }
  GridFunction slice(std::size_t k) const;
  std::span<const double> slice_values(std::size_t k) const;
  const std::vector<double>& data() const noexcept { return data_; }

  void append(double t, std::span<const double> values);
  /// Reverses the slice order (used by backward solvers).
  void reverse();

  // Solver metadata.
  int time_steps = 0;
  double clipped_mass = 0.0;
  bool flagged_invalid = false;

 private:
  TorusDomain domain_;
  GridSpec grid_;
  double horizon_;
  std::vector<double> times_;
  std::vector<double> data_;
};

struct FPProblem {
  DriftField drift;
  GridDensity initial;
  double horizon;
  int time_steps = 0;    ///< 0 picks the smallest stable count
  int record_every = 1;  ///< store every k-th step (the final step is always stored)
};

struct KBEProblem {
  DriftField drift;
  GridFunction terminal;
  double horizon;
  int time_steps = 0;
  int record_every = 1;
  double diffusion = 1.0;  ///< constant alpha in -d_t phi - alpha lap phi + b . grad phi = 0
  double floor_M = 1.0;    ///< diagnostic floor: alpha >= 1 / M is required
};

/// Advective CFL number used by the solvers; stability needs <= 1.
double advection_cfl(double dt, double drift_sup, const TorusDomain& domain, const GridSpec& grid);
/// Smallest step count whose CFL number is at most 0.9 with a 25% margin on the sampled sup.
int stable_time_steps(const DriftField& b, double horizon, const GridSpec& grid);

/// dm/dt = lap m + div(m b). Strang splitting: exact spectral heat half steps
/// around an SSP-RK3 step of the spectral advection term.
SpaceTimeField solve_fokker_planck(const FPProblem& p);

/// -d_t phi - lap phi + b . grad phi = 0 with phi(T) = psi, integrated backward.
/// Slices are stored in increasing time.
SpaceTimeField solve_kbe(const KBEProblem& p);

/// u = -2 alpha log phi from solve_kbe. Requires psi >= 1.
SpaceTimeField solve_hjb_hopf_cole(const KBEProblem& p);
/// Direct split solve of -d_t u - alpha lap u + |grad u|^2 / 2 + b . grad u = 0,
/// kept as a cross-check of the transform.
SpaceTimeField solve_hjb_direct(const KBEProblem& p);

struct DualityCheck {
  double direct = 0.0;    ///< int psi d(m1 - m2)(T) from the two forward solves
  double identity = 0.0;  ///< int (m1 - m2)(0) phi(0) + int int m2 grad phi . (b2 - b1)
  double residual = 0.0;  ///< |direct - identity|
};

/// Both sides of the forward/backward duality identity, phi solving the
/// backward equation with drift b1 and terminal psi. The time integral uses
/// the trapezoid rule on the shared step grid.
DualityCheck duality_check(const DriftField& b1, const DriftField& b2, const GridDensity& m1,
                           const GridDensity& m2, const GridFunction& psi, double T, int steps);

/// Maximum over nodes of |grad f| by spectral differentiation.
double grad_sup(const GridFunction& f);

struct BernsteinReport {
  double bounded_terminal_ratio = 0.0;   ///< max_t (T-t)|grad phi|^2 / (|psi|^3 (T |grad b| + 1))
  double lipschitz_terminal_ratio = 0.0; ///< max_t |grad phi|^2 / (|psi|_{C1}^3 (1 + |grad b|))
  double max_grad_phi = 0.0;
  double psi_sup = 0.0;
  double psi_c1 = 0.0;
  NormEstimate grad_b;
  int grid_n = 0;
};

BernsteinReport bernstein_report(const SpaceTimeField& phi_path, const NormEstimate& grad_b);
BernsteinReport bernstein_report(const SpaceTimeField& phi_path, const DriftField& drift);

/// Flat binary: "TSGMSTF1", int32 dim, int32 n, int32 steps, int32 slices,
/// double T, double R, slice times, then row-major slice payload.
void write_binary(const std::string& path, const SpaceTimeField& field);
SpaceTimeField read_binary(const std::string& path);
/// One slice as CSV with columns x[,y],value.
void write_csv_slice(const std::string& path, const SpaceTimeField& field, std::size_t slice);

}  // namespace tsgm
