#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "tsgm/error.hpp"

namespace tsgm {

/// Vectors and points carry two slots; for d = 1 the second slot is zero.
using Vec = std::array<double, 2>;

inline Vec operator+(const Vec& a, const Vec& b) { return {a[0] + b[0], a[1] + b[1]}; }
inline Vec operator-(const Vec& a, const Vec& b) { return {a[0] - b[0], a[1] - b[1]}; }
inline Vec operator*(double s, const Vec& a) { return {s * a[0], s * a[1]}; }
inline double dot(const Vec& a, const Vec& b) { return a[0] * b[0] + a[1] * b[1]; }

/// Flat torus R T^d with d in {1, 2}.
class TorusDomain {
 public:
  TorusDomain(double radius, int dim);

  double radius() const noexcept { return radius_; }
  int dim() const noexcept { return dim_; }
  double volume() const noexcept;

  bool operator==(const TorusDomain& other) const noexcept {
    return radius_ == other.radius_ && dim_ == other.dim_;
  }

 private:
  double radius_;
  int dim_;
};

struct TorusPoint {
  Vec coords{0.0, 0.0};
  double operator[](std::size_t i) const { return coords[i]; }
};

/// Reduces raw coordinates into [0, R). Throws invalid_input on non-finite input.
TorusPoint wrap(const TorusDomain& domain, const Vec& raw);
TorusPoint wrap(const TorusDomain& domain, double raw_x);
double wrap_coord(double x, double radius);

/// Signed minimal-image displacement y - x, each component in [-R/2, R/2).
Vec displacement(const TorusDomain& domain, const TorusPoint& x, const TorusPoint& y);
double torus_distance(const TorusDomain& domain, const TorusPoint& x, const TorusPoint& y);

/// Uniform periodic grid with n nodes per axis at x_i = i h.
class GridSpec {
 public:
  explicit GridSpec(int nodes_per_axis);
  int n() const noexcept { return n_; }
  double spacing(const TorusDomain& domain) const noexcept { return domain.radius() / n_; }
  std::size_t size(const TorusDomain& domain) const noexcept;
  bool operator==(const GridSpec& other) const noexcept { return n_ == other.n_; }

 private:
  int n_;
};

/// Real values on a periodic grid, row-major with axis 0 slowest for d = 2.
class GridFunction {
 public:
  GridFunction(TorusDomain domain, GridSpec grid);
  GridFunction(TorusDomain domain, GridSpec grid, std::vector<double> values);

  template <class F>
  static GridFunction tabulate(const TorusDomain& domain, const GridSpec& grid, F&& f) {
    GridFunction out(domain, grid);
    for (std::size_t k = 0; k < out.size(); ++k) out.values_[k] = f(out.node(k));
    return out;
  }

  const TorusDomain& domain() const noexcept { return domain_; }
  const GridSpec& grid() const noexcept { return grid_; }
  std::size_t size() const noexcept { return values_.size(); }
  double spacing() const noexcept { return grid_.spacing(domain_); }
  double cell_volume() const noexcept;
  TorusPoint node(std::size_t flat) const;

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  double operator[](std::size_t k) const { return values_[k]; }
  double& operator[](std::size_t k) { return values_[k]; }

  double max_abs() const;
  void require_same_layout(const GridFunction& other) const;

 private:
  TorusDomain domain_;
  GridSpec grid_;
  std::vector<double> values_;
};

/// Periodic trapezoidal quadrature: sum of values times h^d.
double grid_integrate(const GridFunction& f);

/// Nonnegative grid function integrating to one within `tolerance`.
class GridDensity {
 public:
  static constexpr double default_tolerance = 1e-8;

  explicit GridDensity(GridFunction values, double tolerance = default_tolerance);
  /// Clips tiny negatives, rescales to unit mass.
  static GridDensity normalized(GridFunction values);
  static GridDensity uniform(const TorusDomain& domain, const GridSpec& grid);

  const GridFunction& function() const noexcept { return f_; }
  const TorusDomain& domain() const noexcept { return f_.domain(); }
  const GridSpec& grid() const noexcept { return f_.grid(); }
  std::span<const double> values() const noexcept { return f_.values(); }
  std::size_t size() const noexcept { return f_.size(); }
  double operator[](std::size_t k) const { return f_[k]; }
  double tolerance() const noexcept { return tolerance_; }

 private:
  GridFunction f_;
  double tolerance_;
};

struct ParticleEnsemble {
  TorusDomain domain;
  std::vector<TorusPoint> points;
  double time_stamp = 0.0;

  ParticleEnsemble(TorusDomain d, std::vector<TorusPoint> pts, double t);
  std::size_t size() const noexcept { return points.size(); }
};

}  // namespace tsgm
