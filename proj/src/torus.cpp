#include "tsgm/torus.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace tsgm {

TorusDomain::TorusDomain(double radius, int dim) : radius_(radius), dim_(dim) {
  if (!(radius > 0.0) || !std::isfinite(radius))
    fail(ErrorKind::invalid_input, "torus radius must be positive and finite");
  if (dim != 1 && dim != 2) fail(ErrorKind::invalid_input, "torus dimension must be 1 or 2");
}

double TorusDomain::volume() const noexcept { return dim_ == 1 ? radius_ : radius_ * radius_; }

double wrap_coord(double x, double radius) {
  if (!std::isfinite(x)) fail(ErrorKind::invalid_input, "non-finite coordinate");
  double r = std::fmod(x, radius);
  if (r < 0.0) r += radius;
  // fmod of a tiny negative can round up to exactly R.
  if (r >= radius) r = 0.0;
  return r;
}

TorusPoint wrap(const TorusDomain& domain, const Vec& raw) {
  TorusPoint p;
  for (int i = 0; i < domain.dim(); ++i) p.coords[i] = wrap_coord(raw[i], domain.radius());
  return p;
}

TorusPoint wrap(const TorusDomain& domain, double raw_x) {
  if (domain.dim() != 1) fail(ErrorKind::invalid_input, "scalar wrap requires d = 1");
  return wrap(domain, Vec{raw_x, 0.0});
}

Vec displacement(const TorusDomain& domain, const TorusPoint& x, const TorusPoint& y) {
  const double R = domain.radius();
  Vec out{0.0, 0.0};
  for (int i = 0; i < domain.dim(); ++i) {
    double dx = y.coords[i] - x.coords[i];
    dx -= R * std::round(dx / R);
    out[i] = dx;
  }
  return out;
}

double torus_distance(const TorusDomain& domain, const TorusPoint& x, const TorusPoint& y) {
  const Vec v = displacement(domain, x, y);
  return std::sqrt(dot(v, v));
}

GridSpec::GridSpec(int nodes_per_axis) : n_(nodes_per_axis) {
  if (nodes_per_axis < 8 || nodes_per_axis % 2 != 0)
    fail(ErrorKind::invalid_input,
         "grid needs an even node count >= 8, got " + std::to_string(nodes_per_axis));
}

std::size_t GridSpec::size(const TorusDomain& domain) const noexcept {
  const auto n = static_cast<std::size_t>(n_);
  return domain.dim() == 1 ? n : n * n;
}

GridFunction::GridFunction(TorusDomain domain, GridSpec grid)
    : domain_(domain), grid_(grid), values_(grid.size(domain), 0.0) {}

GridFunction::GridFunction(TorusDomain domain, GridSpec grid, std::vector<double> values)
    : domain_(domain), grid_(grid), values_(std::move(values)) {
  if (values_.size() != grid_.size(domain_))
    fail(ErrorKind::invalid_input, "grid value count does not match the grid");
}

double GridFunction::cell_volume() const noexcept {
  const double h = spacing();
  return domain_.dim() == 1 ? h : h * h;
}

TorusPoint GridFunction::node(std::size_t flat) const {
  const double h = spacing();
  const auto n = static_cast<std::size_t>(grid_.n());
  if (domain_.dim() == 1) return TorusPoint{{static_cast<double>(flat) * h, 0.0}};
  return TorusPoint{{static_cast<double>(flat / n) * h, static_cast<double>(flat % n) * h}};
}

double GridFunction::max_abs() const {
  double m = 0.0;
  for (double v : values_) m = std::max(m, std::abs(v));
  return m;
}

void GridFunction::require_same_layout(const GridFunction& other) const {
  if (!(domain_ == other.domain_) || !(grid_ == other.grid_))
    fail(ErrorKind::domain_mismatch, "grid functions live on different grids");
}

double grid_integrate(const GridFunction& f) {
  double sum = 0.0;
  for (double v : f.values()) {
    if (!std::isfinite(v)) fail(ErrorKind::invalid_input, "non-finite grid value");
    sum += v;
  }
  return sum * f.cell_volume();
}

GridDensity::GridDensity(GridFunction values, double tolerance)
    : f_(std::move(values)), tolerance_(tolerance) {
  for (double v : f_.values())
    if (!(v >= 0.0)) fail(ErrorKind::invalid_input, "density values must be nonnegative");
  const double mass = grid_integrate(f_);
  if (std::abs(mass - 1.0) > tolerance_)
    fail(ErrorKind::invalid_input, "density mass " + std::to_string(mass) + " is not 1");
}

GridDensity GridDensity::normalized(GridFunction values) {
  for (auto& v : values.values()) {
    if (!std::isfinite(v)) fail(ErrorKind::invalid_input, "non-finite density value");
    v = std::max(v, 0.0);
  }
  const double mass = grid_integrate(values);
  if (!(mass > 0.0)) fail(ErrorKind::invalid_input, "density has zero mass");
  for (auto& v : values.values()) v /= mass;
  return GridDensity(std::move(values), 1e-12);
}

GridDensity GridDensity::uniform(const TorusDomain& domain, const GridSpec& grid) {
  GridFunction f(domain, grid, std::vector<double>(grid.size(domain), 1.0 / domain.volume()));
  return GridDensity(std::move(f));
}

ParticleEnsemble::ParticleEnsemble(TorusDomain d, std::vector<TorusPoint> pts, double t)
    : domain(d), points(std::move(pts)), time_stamp(t) {
  if (points.empty()) fail(ErrorKind::invalid_input, "particle ensemble must be nonempty");
  for (const auto& p : points)
    for (int i = 0; i < domain.dim(); ++i)
      if (!(p.coords[i] >= 0.0 && p.coords[i] < domain.radius()))
        fail(ErrorKind::invalid_input, "ensemble point is not wrapped");
}

}  // namespace tsgm
