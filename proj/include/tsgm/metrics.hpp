#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "tsgm/torus.hpp"

namespace tsgm {

enum class TransportMethod { circle_exact, grid_lp, entropic, downsampled_lp, empirical_match };
const char* to_string(TransportMethod m);

/// A distance together with how it was obtained. `certified_bound` is an
/// absolute bound on |distance - true W1|; zero for exact methods up to LP
/// round-off, which is folded in from the primal-dual gap.
struct TransportResult {
  double distance = 0.0;
  TransportMethod method = TransportMethod::circle_exact;
  double certified_bound = 0.0;
  double regularization = 0.0;  ///< entropic parameter, 0 otherwise
  int grid_level = 0;           ///< nodes per axis actually solved on, 0 for point sets
  bool resampled = false;
  bool certifiable = true;  ///< false when a debugging cost was used
};

/// Finite measure made of weighted atoms.
struct DiscreteMeasure {
  std::vector<TorusPoint> points;
  std::vector<double> weights;
};

/// Grid densities are read as atoms of mass f_i h^d at the nodes.
DiscreteMeasure as_measure(const GridDensity& m);
DiscreteMeasure as_measure(std::span<const TorusPoint> points);

// ---- d = 1 ----------------------------------------------------------------

/// Exact circular W1 via the rotation-minimised CDF formula.
TransportResult w1_circle(const TorusDomain& domain, const DiscreteMeasure& a,
                          const DiscreteMeasure& b);
TransportResult w1_circle(const GridDensity& a, const GridDensity& b);
TransportResult w1_circle(const ParticleEnsemble& a, const ParticleEnsemble& b);

// ---- generic discrete solvers ---------------------------------------------

/// Dense cost matrix in row-major order.
struct CostMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> c;
  double operator()(std::size_t i, std::size_t j) const { return c[i * cols + j]; }
};

CostMatrix torus_cost(const TorusDomain& domain, std::span<const TorusPoint> a,
                      std::span<const TorusPoint> b, bool euclidean = false);

struct LpSolution {
  double primal = 0.0;
  double dual = 0.0;  ///< a valid lower bound after feasibility repair
  std::size_t pivots = 0;
};

/// Transportation simplex with MODI potentials and block pricing. The supplies
/// and demands must have equal total mass.
LpSolution solve_transport_lp(std::span<const double> supply, std::span<const double> demand,
                              const CostMatrix& cost);

/// Minimum mean matching cost for an n x n cost matrix (Hungarian algorithm).
double assignment_cost(const CostMatrix& cost);

struct SinkhornBounds {
  double upper = 0.0;  ///< cost of the rounded feasible plan
  double lower = 0.0;  ///< c-transformed dual value
  int iterations = 0;
};

/// Log-domain Sinkhorn followed by rounding onto the transport polytope; the
/// two returned numbers bracket the exact optimum.
SinkhornBounds sinkhorn_certified(std::span<const double> a, std::span<const double> b,
                                  const CostMatrix& cost, double regularization,
                                  int max_iterations = 5000, double marginal_tol = 1e-8);

// ---- d = 2 grids ----------------------------------------------------------

struct W1GridOptions {
  int exact_max_n = 32;
  bool large_use_entropic = false;  ///< otherwise downsample to <= exact_max_n
  double entropic_regularization = 0.0;  ///< 0 selects h / 4
  bool euclidean_cost = false;           ///< debugging only, result not certifiable
};

/// W1 between grid densities. For d = 1 the circle formula is used.
TransportResult w1_grid(const GridDensity& a, const GridDensity& b, const W1GridOptions& opt = {});
TransportResult w1_grid_entropic(const GridDensity& a, const GridDensity& b, double regularization);

/// Quadrature of |a - b|; equals twice the total variation distance.
double l1_distance(const GridDensity& a, const GridDensity& b);

// ---- ensembles --------------------------------------------------------------

struct W1EmpiricalOptions {
  std::size_t exact_max = 512;
  std::size_t entropic_max = 4096;  ///< larger sets are subsampled deterministically
  std::uint64_t seed = 0;
};

TransportResult w1_empirical(const ParticleEnsemble& a, const ParticleEnsemble& b,
                             const W1EmpiricalOptions& opt = {});

}  // namespace tsgm
