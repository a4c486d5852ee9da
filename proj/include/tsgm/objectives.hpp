#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tsgm/distributions.hpp"
#include "tsgm/score.hpp"

namespace tsgm {

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].
std::vector<std::pair<double, double>> gauss_legendre(int n);

/// Time rule on [lo, hi]: `points`-point Gauss-Legendre on each of
/// ceil(log10(hi / lo)) geometric panels when hi / lo > 10, one panel otherwise.
std::vector<std::pair<double, double>> time_rule(double lo, double hi, int points = 32);

enum class Estimator { grid_quadrature, monte_carlo };
const char* to_string(Estimator e);

struct ObjectiveOptions {
  int grid_n = 0;        ///< 0 picks mollify_grid(domain, window start)
  int gl_points = 32;    ///< Gauss-Legendre points per time panel
  bool refine = false;   ///< also evaluate on the doubled grid and report the change
  int mc_samples = 100000;
  std::uint64_t seed = 0;
};

struct ObjectiveReport {
  std::string name;
  double value = 0.0;
  Estimator estimator = Estimator::grid_quadrature;
  double standard_error = 0.0;    ///< Monte Carlo only
  double refinement_delta = -1.0; ///< grid only; negative when not computed
  double s_lo = 0.0, s_hi = 0.0;
  int grid_n = 0;
  int time_nodes = 0;
  std::map<std::string, double> components;
};

void to_json(nlohmann::json& j, const ObjectiveReport& r);

/// int_{s_lo}^{s_hi} int |s - grad log eta|^2 eta dx ds.
/// Components: score_sq, cross, flow_sq; their sum equals the value up to round-off.
ObjectiveReport esm_objective(const ScoreField& score, const HeatFlowLaw& flow, double s_lo, double s_hi,
                              const ObjectiveOptions& opt = {});

/// int int (|s|^2 + 2 div s) eta dx ds. Components: score_sq, divergence.
ObjectiveReport ism_objective(const ScoreField& score, const HeatFlowLaw& flow, double s_lo, double s_hi,
                              const ObjectiveOptions& opt = {});

/// (1/N) sum_j int_eps^T int |s - grad log Gamma(t)(x - z_j)|^2 Gamma(t)(x - z_j) dx dt.
ObjectiveReport dsm_objective(const ScoreField& score, const std::vector<TorusPoint>& sample, double epsilon,
                              double horizon, Estimator estimator, const ObjectiveOptions& opt = {});

struct FisherReport {
  double quadrature = 0.0;     ///< int int |grad eta|^2 / eta
  double entropy_route = 0.0;  ///< H(s_lo) - H(s_hi), H = int eta log eta
  double relative_gap = 0.0;
  int grid_n = 0;
};

FisherReport fisher_term(const HeatFlowLaw& flow, double s_lo, double s_hi, const ObjectiveOptions& opt = {});

struct IdentityReport {
  ObjectiveReport esm, ism;
  FisherReport fisher;
  double residual = 0.0;  ///< ESM - ISM - Fisher
  double relative = 0.0;  ///< |residual| / (1 + ESM)
};

/// ESM - ISM - Fisher for a flow with a density on the window.
IdentityReport verify_identities(const ScoreField& score, const HeatFlowLaw& flow, double s_lo, double s_hi,
                                 const ObjectiveOptions& opt = {});

struct FiniteSampleReport {
  ObjectiveReport dsm, esm;     ///< esm is taken against eta^N(t) = Gamma(t) * pi^N on [eps, T]
  double offset = 0.0;          ///< DSM - ESM
  double predicted_offset = 0.0; ///< (1/N) sum_j int |grad log Gamma_j|^2 Gamma_j - Fisher(eta^N)
  double residual = 0.0;        ///< offset - predicted_offset
  double relative = 0.0;        ///< |residual| / (1 + DSM)
};

FiniteSampleReport verify_finite_sample(const ScoreField& score, const std::vector<TorusPoint>& sample,
                                        double epsilon, double horizon, const ObjectiveOptions& opt = {});

void to_json(nlohmann::json& j, const FisherReport& r);
void to_json(nlohmann::json& j, const IdentityReport& r);
void to_json(nlohmann::json& j, const FiniteSampleReport& r);

}  // namespace tsgm
