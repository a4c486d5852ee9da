#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsgm/metrics.hpp"
#include "tsgm/objectives.hpp"
#include "tsgm/pde.hpp"
#include "tsgm/score.hpp"
#include "tsgm/sde.hpp"

namespace tsgm {

/// A measured distance and an absolute bound on its error.
struct Measured {
  double value = 0.0;
  double bound = 0.0;
  std::string method = "exact";
  double upper() const { return value + bound; }
};

Measured measured(const TransportResult& r);
void to_json(nlohmann::json& j, const Measured& m);

// ---- drift errors -----------------------------------------------------------

enum class NormMode { sup_in_time, space_time };
const char* to_string(NormMode m);

/// Weighted L2 distance of two drifts against the slices of a density path.
/// Space-time mode integrates the squared slice norms with the trapezoid rule
/// over the path's own times.
double drift_l2_error(const DriftField& b1, const DriftField& b2, const SpaceTimeField& weight,
                      NormMode mode);

/// Same norm for two scores against a heat flow over [s_lo, s_hi], on the grid
/// and time rule used by esm_objective. The sup is taken over the rule's nodes
/// and both window ends.
double score_l2_error(const ScoreField& s1, const ScoreField& s2, const HeatFlowLaw& flow, double s_lo,
                      double s_hi, NormMode mode, const ObjectiveOptions& opt = {});

// ---- certificates -----------------------------------------------------------

struct BoundCertificate {
  std::string theorem;
  Measured lhs;
  double prefactor = 1.0;                    ///< the common factor in front of the bracket
  std::map<std::string, double> rhs_terms;   ///< additive contributions, constant free
  double rhs = 0.0;                          ///< sum of rhs_terms
  double rhs_upper = 0.0;                    ///< rhs with every input moved to its upper bound
  double fitted_constant = 0.0;              ///< lhs / rhs
  bool inconsistent = false;                 ///< rhs == 0 while lhs > 0
  nlohmann::json provenance = nlohmann::json::object();

  std::string dominant_term() const;
};

void to_json(nlohmann::json& j, const BoundCertificate& c);

/// Fills rhs, dominant bookkeeping and the fitted constant from rhs_terms.
void finalize(BoundCertificate& c);

struct WupInputs {
  double eps1 = 0.0;         ///< sup_t ||b2 - b1||_{L2(m2(t))}
  double eps2 = 0.0;         ///< space-time L2(m2) norm of b2 - b1
  NormEstimate grad_b1;      ///< ||grad b1||_inf
  double T = 1.0;
  double R = 1.0;
  Measured init_d1;          ///< d1(m1, m2)
  double init_l1 = 0.0;      ///< ||m1 - m2||_L1
};

void to_json(nlohmann::json& j, const WupInputs& w);

/// Three certificates in order: "wup-l1-d1", "wup-l1-l1", "wup-d1-torus".
std::vector<BoundCertificate> wup_certificate(const WupInputs& in, const Measured& lhs_l1,
                                              const Measured& lhs_d1);

struct WupRun {
  WupInputs inputs;
  Measured lhs_d1;
  double lhs_l1 = 0.0;
  std::vector<BoundCertificate> certificates;
};

/// Solves both Fokker-Planck problems, measures the terminal distances and
/// the drift errors against the m2 path, and assembles wup_certificate.
WupRun wup_experiment(const DriftField& b1, const DriftField& b2, const GridDensity& m1,
                      const GridDensity& m2, double T, int time_steps = 0);

// ---- long-time contraction --------------------------------------------------

struct ContractionFit {
  std::vector<double> times;
  std::vector<double> d1;       ///< d1(flow(t), uniform) at every requested time
  std::vector<bool> used;       ///< above the noise floor and included in the fit
  double rate = 0.0;            ///< -slope of log d1 vs t, i.e. omega / R^2
  double rate_se = 0.0;
  double omega = 0.0;           ///< rate * R^2
  double omega_lo = 0.0, omega_hi = 0.0;  ///< 95% interval
  double r_squared = 0.0;
  double R = 1.0;
  int grid_n = 0;
};

void to_json(nlohmann::json& j, const ContractionFit& f);

/// Least squares of log d1(Gamma(t) * m, uniform) against t. Distances at or
/// below `floor` are dropped; fewer than four remaining raise insufficient_data.
ContractionFit contraction_fit(const GridDensity& initial, const std::vector<double>& times,
                               double floor = 1e-10);
ContractionFit contraction_fit(const TargetDistribution& pi, const std::vector<double>& times,
                               const GridSpec& grid, double floor = 1e-10);

/// Eight evenly spaced times on [0.05, 0.3] R^2.
std::vector<double> default_contraction_times(double R);

// ---- score-based generation ---------------------------------------------------

struct EsmInputs {
  double e_nn = 0.0;                ///< space-time ESM value over [0, T]
  std::optional<double> e_nn_sup;   ///< sup-in-time squared error, enables the TV form
  NormEstimate grad_s;
  double T = 1.0;
  double R = 1.0;
  double omega = 4 * M_PI * M_PI;
  Measured d1_reference;            ///< d1(pi, uniform)
};

void to_json(nlohmann::json& j, const EsmInputs& e);

/// "esm-d1" always; "esm-tv" when e_nn_sup and lhs_l1 are both present.
std::vector<BoundCertificate> esm_certificate(const EsmInputs& in, const Measured& lhs_d1,
                                              std::optional<Measured> lhs_l1 = std::nullopt);

struct EsmRunOptions {
  SdeConfig sde;                    ///< horizon is overwritten with T
  int grid_n = 0;                   ///< reference grid; 0 picks 1024 (d = 1) or 64 (d = 2)
  std::optional<ContractionFit> contraction;
  ObjectiveOptions objective;
};

struct EsmRun {
  EsmInputs inputs;
  Measured lhs_d1;
  std::vector<BoundCertificate> certificates;
  ParticleEnsemble generated;
};

/// Measures every input of esm_certificate for a target with a density:
/// ESM over [0, T], gradient of the score, d1 to uniform, the contraction rate
/// (its lower 95% end) and the generated law's distance to pi.
EsmRun certify_esm(const ScoreField& score, const TargetDistribution& pi, double T,
                   const EsmRunOptions& opt);

/// d1 between an ensemble and a target with a density, through atoms at grid
/// nodes; the bound carries half a cell per axis of quantization.
Measured d1_to_target(const ParticleEnsemble& e, const TargetDistribution& pi, const GridSpec& grid);

struct DsmTransferInputs {
  double e_nn = 0.0;
  double delta = 0.0;       ///< density lower bound
  double epsilon = 0.0;
  double T = 1.0;
  double c2_norm = 0.0;
  double d1_sample = 0.0;   ///< d1(pi^N, pi)
};

struct DsmTransfer {
  std::map<std::string, double> factors;  ///< one, log_delta, inv_sqrt_T, c2
  double factor = 0.0;                    ///< sum of factors
  double sample_term = 0.0;               ///< factor * d1_sample
  double e_nn = 0.0;
  double e_nn_prime = 0.0;
  std::string dominant;                   ///< "e_nn" or one of the factor names
};

void to_json(nlohmann::json& j, const DsmTransferInputs& t);
void to_json(nlohmann::json& j, const DsmTransfer& t);

DsmTransfer dsm_to_esm_transfer(const DsmTransferInputs& in);

struct DsmPointwiseInputs {
  DsmTransferInputs transfer;
  NormEstimate grad_s;
  double R = 1.0;
  double omega = 4 * M_PI * M_PI;
  Measured d1_reference;  ///< d1(pi, uniform)
};

BoundCertificate dsm_pointwise_certificate(const DsmPointwiseInputs& in, const Measured& lhs_d1);

struct DsmRunConfig {
  double epsilon = 0.01;
  double T = 1.0;
  TrainConfig train;           ///< epsilon, horizon and seed are overwritten
  NetShape shape;
  SdeConfig sde;               ///< horizon set to T
  int grid_n = 1024;           ///< reference grid for d1 against pi
  std::optional<ContractionFit> contraction;
  std::uint64_t seed = 1;
  bool direct_esm = true;      ///< also measure ESM against the flow of pi^eps
  bool generate = true;        ///< run the reverse SDE and measure the lhs
};

struct DsmRun {
  DsmTransferInputs transfer_inputs;
  DsmTransfer transfer;
  double direct_esm = -1.0;    ///< J(eta^{pi^eps}, theta); negative when not measured
  CkNormEstimate norms;
  TrainResult training;
  Measured lhs_d1;
  double omega = 0.0;
  BoundCertificate certificate;
};

void to_json(nlohmann::json& j, const DsmRun& r);

/// Trains a network on `sample` by DSM over [epsilon, T] and measures every
/// input of the pointwise certificate. `pi` must have a density.
DsmRun certify_dsm(const TargetDistribution& pi, const std::vector<TorusPoint>& sample, const DsmRunConfig& cfg);

// ---- averaged experiment ----------------------------------------------------

struct AverageDsmConfig {
  std::size_t N = 16;
  double epsilon = 0.01;
  double T = 1.0;
  int trials = 8;
  TrainConfig train;           ///< epsilon, horizon and seed are set per trial
  NetShape shape;
  SdeConfig sde;               ///< horizon set to T, seed set per trial
  double c2_cap = 0.0;         ///< A; 0 takes the largest observed norm
  bool exact_control = false;  ///< skip training; exact score of pi, same early stop
  std::uint64_t seed = 1;
  int grid_n = 1024;
  double omega = 4 * M_PI * M_PI;
  double fitted_constant = 1.0;  ///< used for the minimal-T condition
};

struct AverageDsmTrial {
  std::uint64_t seed = 0;
  double lhs = 0.0;
  double e_nn = 0.0;
  double c2_norm = 0.0;
  bool over_cap = false;
};

struct AverageDsmResult {
  std::vector<AverageDsmTrial> trials;
  std::vector<std::string> dropped;  ///< messages of trials lost to training divergence
  double mean = 0.0, se = 0.0;
  double A = 0.0;
  double e_nn = 0.0;                 ///< largest e_nn over kept trials
  double e_nn_prime = 0.0;
  BoundCertificate certificate;
  double minimal_T = 0.0;            ///< smallest T meeting the long-time condition with the fitted constant
};

void to_json(nlohmann::json& j, const AverageDsmResult& r);

AverageDsmResult average_dsm_experiment(const TargetDistribution& pi, const AverageDsmConfig& cfg);

// ---- expectations -------------------------------------------------------------

struct ExpectationBound {
  double lipschitz = 0.0;
  double measured = 0.0;   ///< Lip(h) * lhs
  double certified = 0.0;  ///< Lip(h) * constant * rhs
};

ExpectationBound expectation_error_bound(double lipschitz, const BoundCertificate& c, double constant = 1.0);

/// Largest difference quotient of h between neighbouring grid nodes.
double lipschitz_estimate(const std::function<double(const TorusPoint&)>& h, const TorusDomain& domain,
                          const GridSpec& grid);

// ---- sweep statistics ---------------------------------------------------------

struct LineFit {
  double slope = 0.0, intercept = 0.0;
  double slope_se = 0.0;
  double slope_lo = 0.0, slope_hi = 0.0;  ///< 95% interval
  std::size_t points = 0;
};

void to_json(nlohmann::json& j, const LineFit& f);

LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y);
/// fit_line on logs of both axes; nonpositive pairs are skipped.
LineFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y);
double spearman(const std::vector<double>& a, const std::vector<double>& b);
/// max / min of the fitted constants.
double constant_spread(const std::vector<BoundCertificate>& certs);

}  // namespace tsgm
