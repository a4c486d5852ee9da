#include "tsgm/certificates.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tsgm/heat_kernel.hpp"
#include "tsgm/rng.hpp"

namespace tsgm {

namespace {

// Two-sided 95% Student t quantiles for 1..30 degrees of freedom.
double t975(std::size_t df) {
  static const double table[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
                                 2.201,  2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
                                 2.080,  2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};
  if (df == 0) return std::numeric_limits<double>::infinity();
  if (df <= 30) return table[df - 1];
  return 1.96 + 2.4 / static_cast<double>(df);
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

void require_nonnegative(double v, const char* what) {
  if (!(v >= 0.0) || !std::isfinite(v)) fail(ErrorKind::invalid_input, std::string(what) + " must be finite and >= 0");
}

GridSpec default_reference_grid(const TorusDomain& dom, int n) {
  if (n > 0) return GridSpec(n);
  return GridSpec(dom.dim() == 1 ? 1024 : 64);
}

// A score read as a drift on [0, hi - lo] with time shifted by lo.
DriftField shifted(const ScoreField& s, double lo) {
  return DriftField(
      s.domain(), [s, lo](double t, const TorusPoint& x) { return s.evaluate(lo + t, x); },
      [s, lo](double t, const TorusPoint& x) { return s.jacobian(lo + t, x); }, s.name());
}

// Bin masses of a target with a density on bins^d cells [i h, (i + 1) h),
// by the midpoint rule on sub cells.
GridDensity bin_masses(const TargetDistribution& pi, int bins, int sub) {
  const TorusDomain& dom = pi.domain();
  const HeatFlowLaw flow(pi);
  const double hf = dom.radius() / (bins * sub);
  GridFunction mass(dom, GridSpec(bins));
  const int m = bins * sub;
  for (int i = 0; i < m; ++i) {
    if (dom.dim() == 1) {
      mass[i / sub] += flow.density(0.0, wrap(dom, (i + 0.5) * hf));
      continue;
    }
    for (int j = 0; j < m; ++j)
      mass[static_cast<std::size_t>(i / sub) * bins + j / sub] +=
          flow.density(0.0, wrap(dom, Vec{(i + 0.5) * hf, (j + 0.5) * hf}));
  }
  return GridDensity::normalized(std::move(mass));
}

}  // namespace

Measured measured(const TransportResult& r) {
  return {r.distance, r.certified_bound, to_string(r.method)};
}

const char* to_string(NormMode m) { return m == NormMode::sup_in_time ? "sup-in-time" : "space-time"; }

double drift_l2_error(const DriftField& b1, const DriftField& b2, const SpaceTimeField& weight, NormMode mode) {
  if (!(b1.domain() == weight.domain()) || !(b2.domain() == weight.domain()))
    fail(ErrorKind::domain_mismatch, "drift and weight live on different tori");
  if (weight.slices() == 0) fail(ErrorKind::invalid_input, "empty weight path");
  const GridFunction probe(weight.domain(), weight.grid());
  const double cv = probe.cell_volume();
  std::vector<double> rows(weight.slices());
  for (std::size_t j = 0; j < weight.slices(); ++j) {
    const double t = weight.time(j);
    const auto m = weight.slice_values(j);
    double s = 0.0;
    for (std::size_t k = 0; k < probe.size(); ++k) {
      const auto x = probe.node(k);
      const Vec d = b2(t, x) - b1(t, x);
      s += dot(d, d) * m[k];
    }
    rows[j] = s * cv;
  }
  if (mode == NormMode::sup_in_time) return std::sqrt(*std::max_element(rows.begin(), rows.end()));
  double total = 0.0;
  for (std::size_t j = 0; j + 1 < rows.size(); ++j)
    total += 0.5 * (rows[j] + rows[j + 1]) * (weight.time(j + 1) - weight.time(j));
  return std::sqrt(total);
}

double score_l2_error(const ScoreField& s1, const ScoreField& s2, const HeatFlowLaw& flow, double s_lo,
                      double s_hi, NormMode mode, const ObjectiveOptions& opt) {
  if (!(s_lo >= 0.0 && s_hi >= s_lo)) fail(ErrorKind::invalid_input, "window must satisfy 0 <= s_lo <= s_hi");
  if (s_lo == 0.0 && !flow.density_at_zero())
    fail(ErrorKind::no_density, "window starts at s = 0 but the flow has no density there");
  const TorusDomain& dom = flow.domain();
  const GridSpec g = opt.grid_n > 0 ? GridSpec(opt.grid_n) : mollify_grid(dom, std::max(s_lo, 1e-8));
  const GridFunction probe(dom, g);
  const double cv = probe.cell_volume();
  auto row = [&](double t) {
    double r = 0.0;
    for (std::size_t k = 0; k < probe.size(); ++k) {
      const auto x = probe.node(k);
      const Vec d = s1.evaluate(t, x) - s2.evaluate(t, x);
      r += dot(d, d) * flow.density(t, x);
    }
    return r;
  };
  const auto rule = time_rule(s_lo, s_hi, opt.gl_points);
  if (mode == NormMode::space_time) {
    double total = 0.0;
    for (const auto& [t, w] : rule) total += w * cv * row(t);
    return std::sqrt(total);
  }
  double best = std::max(row(s_lo), row(s_hi));
  for (const auto& [t, w] : rule) best = std::max(best, row(t));
  return std::sqrt(best * cv);
}

// ---- certificates -----------------------------------------------------------

std::string BoundCertificate::dominant_term() const {
  std::string best;
  double v = -1.0;
  for (const auto& [k, x] : rhs_terms)
    if (x > v) {
      v = x;
      best = k;
    }
  return best;
}

void finalize(BoundCertificate& c) {
  c.rhs = 0.0;
  for (const auto& [k, v] : c.rhs_terms) {
    if (!(v >= 0.0)) fail(ErrorKind::invalid_input, "negative or undefined rhs term " + k);
    c.rhs += v;
  }
  c.rhs_upper = std::max(c.rhs_upper, c.rhs);
  if (c.rhs > 0.0) {
    c.fitted_constant = c.lhs.value / c.rhs;
    c.inconsistent = false;
  } else {
    c.inconsistent = c.lhs.value > c.lhs.bound;
    c.fitted_constant = c.inconsistent ? std::numeric_limits<double>::infinity() : 0.0;
  }
}

void to_json(nlohmann::json& j, const Measured& m) {
  j = nlohmann::json{{"value", m.value}, {"bound", m.bound}, {"method", m.method}};
}

void to_json(nlohmann::json& j, const BoundCertificate& c) {
  j = nlohmann::json{{"theorem", c.theorem},
                     {"lhs", {{"value", c.lhs.value}, {"bound", c.lhs.bound}, {"method", c.lhs.method}}},
                     {"prefactor", c.prefactor},
                     {"rhs_terms", c.rhs_terms},
                     {"rhs", c.rhs},
                     {"rhs_upper", c.rhs_upper},
                     {"fitted_constant", finite_or_null(c.fitted_constant)},
                     {"inconsistent", c.inconsistent},
                     {"dominant_term", c.dominant_term()},
                     {"provenance", c.provenance}};
}

void to_json(nlohmann::json& j, const WupInputs& w) {
  j = nlohmann::json{{"eps1", w.eps1},
                     {"eps2", w.eps2},
                     {"grad_b1", {{"value", w.grad_b1.value}, {"uncertainty", w.grad_b1.uncertainty},
                                  {"grid_n", w.grad_b1.grid_n}}},
                     {"T", w.T},
                     {"R", w.R},
                     {"init_d1", {{"value", w.init_d1.value}, {"bound", w.init_d1.bound},
                                  {"method", w.init_d1.method}}},
                     {"init_l1", w.init_l1}};
}

std::vector<BoundCertificate> wup_certificate(const WupInputs& in, const Measured& lhs_l1,
                                              const Measured& lhs_d1) {
  require_nonnegative(in.eps1, "eps1");
  require_nonnegative(in.eps2, "eps2");
  require_nonnegative(in.grad_b1.value, "grad_b1");
  require_nonnegative(in.init_d1.value, "init_d1");
  require_nonnegative(in.init_l1, "init_l1");
  if (!(in.T > 0.0) || !(in.R > 0.0)) fail(ErrorKind::invalid_input, "T and R must be positive");
  const double g = in.grad_b1.value, gu = g + in.grad_b1.uncertainty;
  const double sT = std::sqrt(in.T);
  const nlohmann::json prov = in;

  std::vector<BoundCertificate> out(3);
  auto& a = out[0];
  a.theorem = "wup-l1-d1";
  a.lhs = lhs_l1;
  a.prefactor = std::sqrt(in.T * g) + 1.0;
  a.rhs_terms = {{"initial_d1", a.prefactor * in.init_d1.value / sT}, {"drift", a.prefactor * sT * in.eps1}};
  a.rhs_upper = (std::sqrt(in.T * gu) + 1.0) * (in.init_d1.upper() / sT + sT * in.eps1);

  auto& b = out[1];
  b.theorem = "wup-l1-l1";
  b.lhs = lhs_l1;
  b.prefactor = a.prefactor;
  b.rhs_terms = {{"initial_l1", b.prefactor * in.init_l1}, {"drift", b.prefactor * sT * in.eps1}};
  b.rhs_upper = (std::sqrt(in.T * gu) + 1.0) * (in.init_l1 + sT * in.eps1);

  auto& c = out[2];
  c.theorem = "wup-d1-torus";
  c.lhs = lhs_d1;
  const double r32 = std::pow(in.R, 1.5);
  c.prefactor = r32 * (1.0 + std::sqrt(g));
  c.rhs_terms = {{"initial_d1", c.prefactor * in.init_d1.value}, {"drift", c.prefactor * in.eps2}};
  c.rhs_upper = r32 * (1.0 + std::sqrt(gu)) * (in.init_d1.upper() + in.eps2);

  for (auto& x : out) {
    x.provenance = prov;
    finalize(x);
  }
  return out;
}

WupRun wup_experiment(const DriftField& b1, const DriftField& b2, const GridDensity& m1, const GridDensity& m2,
                      double T, int time_steps) {
  m1.function().require_same_layout(m2.function());
  const GridSpec grid = m1.grid();
  const int steps = time_steps > 0 ? time_steps
                                   : std::max(stable_time_steps(b1, T, grid), stable_time_steps(b2, T, grid));
  const auto p1 = solve_fokker_planck({b1, m1, T, steps});
  const auto p2 = solve_fokker_planck({b2, m2, T, steps});
  const auto f1 = GridDensity::normalized(p1.slice(p1.slices() - 1));
  const auto f2 = GridDensity::normalized(p2.slice(p2.slices() - 1));

  WupRun r;
  r.inputs.eps1 = drift_l2_error(b1, b2, p2, NormMode::sup_in_time);
  r.inputs.eps2 = drift_l2_error(b1, b2, p2, NormMode::space_time);
  r.inputs.grad_b1 = grad_sup_estimate(b1, T, GridSpec(std::min(grid.n(), m1.domain().dim() == 1 ? 256 : 64)));
  r.inputs.T = T;
  r.inputs.R = m1.domain().radius();
  r.inputs.init_d1 = measured(w1_grid(m1, m2));
  r.inputs.init_l1 = l1_distance(m1, m2);
  r.lhs_d1 = measured(w1_grid(f2, f1));
  r.lhs_l1 = l1_distance(f2, f1);
  r.certificates = wup_certificate(r.inputs, {r.lhs_l1, 0.0, "grid-quadrature"}, r.lhs_d1);
  for (auto& c : r.certificates) {
    c.provenance["grid_n"] = grid.n();
    c.provenance["time_steps"] = steps;
    c.provenance["drifts"] = {b1.name(), b2.name()};
  }
  return r;
}

// ---- contraction ------------------------------------------------------------

void to_json(nlohmann::json& j, const ContractionFit& f) {
  j = nlohmann::json{{"times", f.times},   {"d1", f.d1},           {"used", f.used},
                     {"rate", f.rate},     {"rate_se", f.rate_se}, {"omega", f.omega},
                     {"omega_ci", {f.omega_lo, f.omega_hi}},       {"r_squared", f.r_squared},
                     {"R", f.R},           {"grid_n", f.grid_n}};
}

std::vector<double> default_contraction_times(double R) {
  std::vector<double> t;
  for (int k = 0; k < 8; ++k) t.push_back((0.05 + 0.25 * k / 7.0) * R * R);
  return t;
}

ContractionFit contraction_fit(const GridDensity& initial, const std::vector<double>& times, double floor) {
  const TorusDomain& dom = initial.domain();
  const Spectral sp(dom, initial.grid());
  const auto uni = GridDensity::uniform(dom, initial.grid());
  ContractionFit f;
  f.R = dom.radius();
  f.grid_n = initial.grid().n();
  f.times = times;
  std::vector<double> x, y;
  for (double t : times) {
    if (!(t >= 0.0)) fail(ErrorKind::invalid_input, "contraction times must be >= 0");
    const auto m = convolve_heat(initial, t, sp);
    const double d = w1_grid(m, uni).distance;
    f.d1.push_back(d);
    const bool ok = d > floor;
    f.used.push_back(ok);
    if (ok) {
      x.push_back(t);
      y.push_back(std::log(d));
    }
  }
  if (x.size() < 4)
    fail(ErrorKind::insufficient_data,
         "contraction fit needs 4 distances above the floor, got " + std::to_string(x.size()));
  const LineFit lf = fit_line(x, y);
  const double R2 = f.R * f.R;
  f.rate = -lf.slope;
  f.rate_se = lf.slope_se;
  f.omega = f.rate * R2;
  f.omega_lo = -lf.slope_hi * R2;
  f.omega_hi = -lf.slope_lo * R2;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / y.size();
  double ss = 0.0, sr = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (lf.intercept + lf.slope * x[i]);
    sr += r * r;
    ss += (y[i] - my) * (y[i] - my);
  }
  f.r_squared = ss > 0.0 ? 1.0 - sr / ss : 1.0;
  return f;
}

ContractionFit contraction_fit(const TargetDistribution& pi, const std::vector<double>& times, const GridSpec& grid,
                               double floor) {
  const HeatFlowLaw flow(pi);
  if (pi.has_density()) return contraction_fit(flow.on_grid(0.0, grid), times, floor);
  // Without a density the first time stands in for the initial law.
  const double t0 = *std::min_element(times.begin(), times.end());
  if (!(t0 > 0.0)) fail(ErrorKind::no_density, "empirical initial data needs contraction times > 0");
  std::vector<double> shifted_times;
  for (double t : times) shifted_times.push_back(t - t0);
  auto f = contraction_fit(flow.on_grid(t0, grid), shifted_times, floor);
  f.times = times;
  return f;
}

// ---- ESM --------------------------------------------------------------------

void to_json(nlohmann::json& j, const EsmInputs& e) {
  j = nlohmann::json{{"e_nn", e.e_nn},
                     {"e_nn_sup", e.e_nn_sup ? nlohmann::json(*e.e_nn_sup) : nlohmann::json()},
                     {"grad_s", {{"value", e.grad_s.value}, {"uncertainty", e.grad_s.uncertainty},
                                 {"grid_n", e.grad_s.grid_n}}},
                     {"T", e.T},
                     {"R", e.R},
                     {"omega", e.omega},
                     {"d1_reference", {{"value", e.d1_reference.value}, {"bound", e.d1_reference.bound},
                                       {"method", e.d1_reference.method}}}};
}

std::vector<BoundCertificate> esm_certificate(const EsmInputs& in, const Measured& lhs_d1,
                                              std::optional<Measured> lhs_l1) {
  require_nonnegative(in.e_nn, "e_nn");
  require_nonnegative(in.grad_s.value, "grad_s");
  require_nonnegative(in.d1_reference.value, "d1_reference");
  if (!(in.T > 0.0) || !(in.R > 0.0) || !(in.omega > 0.0))
    fail(ErrorKind::invalid_input, "T, R and omega must be positive");
  const double R = in.R, g = in.grad_s.value, gu = g + in.grad_s.uncertainty;
  const double decay = std::exp(-in.omega * in.T / (R * R));
  const nlohmann::json prov = in;

  std::vector<BoundCertificate> out;
  BoundCertificate d;
  d.theorem = "esm-d1";
  d.lhs = lhs_d1;
  d.prefactor = std::pow(R, 1.5) * (1.0 + std::sqrt(g));
  d.rhs_terms = {{"reference", d.prefactor * R * decay * in.d1_reference.value},
                 {"score", d.prefactor * std::sqrt(in.e_nn)}};
  d.rhs_upper = std::pow(R, 1.5) * (1.0 + std::sqrt(gu)) * (R * decay * in.d1_reference.upper() + std::sqrt(in.e_nn));
  d.provenance = prov;
  finalize(d);
  out.push_back(d);

  if (in.e_nn_sup && lhs_l1) {
    require_nonnegative(*in.e_nn_sup, "e_nn_sup");
    BoundCertificate t;
    t.theorem = "esm-tv";
    t.lhs = *lhs_l1;
    const double sT = std::sqrt(in.T);
    t.prefactor = std::sqrt(in.T * g) + 1.0;
    t.rhs_terms = {{"reference", t.prefactor * R * R * decay / sT * in.d1_reference.value},
                   {"score", t.prefactor * std::sqrt(in.T * *in.e_nn_sup)}};
    t.rhs_upper = (std::sqrt(in.T * gu) + 1.0) *
                  (R * R * decay / sT * in.d1_reference.upper() + std::sqrt(in.T * *in.e_nn_sup));
    t.provenance = prov;
    finalize(t);
    out.push_back(t);
  }
  return out;
}

Measured d1_to_target(const ParticleEnsemble& e, const TargetDistribution& pi, const GridSpec& grid) {
  if (!(e.domain == pi.domain())) fail(ErrorKind::domain_mismatch, "ensemble and target live on different tori");
  if (!pi.has_density()) fail(ErrorKind::no_density, "d1_to_target needs a target with a density");
  const TorusDomain& dom = pi.domain();
  const HeatFlowLaw flow(pi);
  if (dom.dim() == 1) {
    const auto ref = flow.on_grid(0.0, grid);
    const auto r = w1_circle(dom, as_measure(std::span<const TorusPoint>(e.points)), as_measure(ref));
    return {r.distance, r.certified_bound + 0.5 * grid.spacing(dom), "circle-exact-vs-grid-atoms"};
  }
  // d = 2: both laws binned on the same cells, exact LP between the bins.
  const int bins = std::min(32, std::max(8, histogram_bins(e.size())));
  const auto r = w1_grid(histogram(e, bins), bin_masses(pi, bins, 4));
  return {r.distance, r.certified_bound + std::sqrt(2.0) * dom.radius() / bins, "grid-lp-binned"};
}

EsmRun certify_esm(const ScoreField& score, const TargetDistribution& pi, double T, const EsmRunOptions& opt) {
  if (!pi.has_density()) fail(ErrorKind::no_density, "esm certificate needs a target with a density");
  if (!(score.domain() == pi.domain())) fail(ErrorKind::domain_mismatch, "score and target live on different tori");
  const TorusDomain& dom = pi.domain();
  const GridSpec grid = default_reference_grid(dom, opt.grid_n);
  const HeatFlowLaw flow(pi);
  const auto exact = ScoreField::exact(flow, T);
  ObjectiveOptions oo = opt.objective;
  if (oo.grid_n == 0) oo.grid_n = grid.n();

  SdeConfig sde = opt.sde;
  sde.horizon = T;
  EsmRun r{.inputs = {}, .lhs_d1 = {}, .certificates = {}, .generated = simulate_reverse(score, sde).final()};
  r.inputs.T = T;
  r.inputs.R = dom.radius();
  r.inputs.e_nn = esm_objective(score, flow, 0.0, T, oo).value;
  const double sup = score_l2_error(score, exact, flow, 0.0, T, NormMode::sup_in_time, oo);
  r.inputs.e_nn_sup = sup * sup;
  r.inputs.grad_s = grad_sup_estimate(shifted(score, 0.0), T, GridSpec(dom.dim() == 1 ? 128 : 32));
  r.inputs.d1_reference = measured(w1_grid(flow.on_grid(0.0, grid), GridDensity::uniform(dom, grid)));
  const ContractionFit cf = opt.contraction ? *opt.contraction
                                            : contraction_fit(pi, default_contraction_times(dom.radius()), grid);
  r.inputs.omega = cf.omega_lo > 0.0 ? cf.omega_lo : cf.omega;

  r.lhs_d1 = d1_to_target(r.generated, pi, grid);

  // TV side through a histogram; its bound is the multinomial noise floor.
  const int bins = histogram_bins(r.generated.size());
  const auto hist = histogram(r.generated, bins);
  const auto binned = bin_masses(pi, bins, dom.dim() == 1 ? 8 : 4);
  double noise = 0.0;
  for (std::size_t k = 0; k < binned.size(); ++k) {
    const double p = binned[k] * binned.function().cell_volume();
    noise += std::sqrt(2.0 / M_PI) * std::sqrt(p * (1.0 - p) / static_cast<double>(r.generated.size()));
  }
  const Measured l1{l1_distance(hist, binned), noise, "histogram"};

  r.certificates = esm_certificate(r.inputs, r.lhs_d1, l1);
  for (auto& c : r.certificates) {
    c.provenance["score"] = score.name();
    c.provenance["score_provenance"] = to_string(score.provenance());
    c.provenance["target"] = pi.kind_name();
    c.provenance["sde"] = {{"dt", sde.dt}, {"particles", sde.particles}, {"seed", sde.seed}};
    c.provenance["reference_grid_n"] = grid.n();
    c.provenance["contraction"] = cf;
  }
  return r;
}

// ---- DSM --------------------------------------------------------------------

void to_json(nlohmann::json& j, const DsmTransferInputs& t) {
  j = nlohmann::json{{"e_nn", t.e_nn},       {"delta", t.delta},     {"epsilon", t.epsilon},
                     {"T", t.T},             {"c2_norm", t.c2_norm}, {"d1_sample", t.d1_sample}};
}

void to_json(nlohmann::json& j, const DsmTransfer& t) {
  j = nlohmann::json{{"factors", t.factors}, {"factor", t.factor},         {"sample_term", t.sample_term},
                     {"e_nn", t.e_nn},       {"e_nn_prime", t.e_nn_prime}, {"dominant", t.dominant}};
}

DsmTransfer dsm_to_esm_transfer(const DsmTransferInputs& in) {
  if (!(in.delta > 0.0)) fail(ErrorKind::invalid_input, "density lower bound must be positive");
  if (!(in.epsilon > 0.0)) fail(ErrorKind::invalid_input, "epsilon must be positive");
  if (!(in.T > 0.0)) fail(ErrorKind::invalid_input, "T must be positive");
  require_nonnegative(in.e_nn, "e_nn");
  require_nonnegative(in.c2_norm, "c2_norm");
  require_nonnegative(in.d1_sample, "d1_sample");
  DsmTransfer t;
  t.factors = {{"one", 1.0},
               {"log_delta", std::abs(std::log(in.delta)) / std::sqrt(in.epsilon)},
               {"inv_sqrt_T", 1.0 / std::sqrt(in.T)},
               {"c2", in.T * in.c2_norm * in.c2_norm}};
  for (const auto& [k, v] : t.factors) t.factor += v;
  t.sample_term = t.factor * in.d1_sample;
  t.e_nn = in.e_nn;
  t.e_nn_prime = in.e_nn + t.sample_term;
  t.dominant = "e_nn";
  double best = in.e_nn;
  for (const auto& [k, v] : t.factors)
    if (v * in.d1_sample > best) {
      best = v * in.d1_sample;
      t.dominant = k;
    }
  return t;
}

BoundCertificate dsm_pointwise_certificate(const DsmPointwiseInputs& in, const Measured& lhs_d1) {
  const DsmTransfer tr = dsm_to_esm_transfer(in.transfer);
  require_nonnegative(in.grad_s.value, "grad_s");
  require_nonnegative(in.d1_reference.value, "d1_reference");
  if (!(in.R > 0.0) || !(in.omega > 0.0)) fail(ErrorKind::invalid_input, "R and omega must be positive");
  const double R = in.R, T = in.transfer.T;
  const double decay = std::exp(-in.omega * T / (R * R));
  BoundCertificate c;
  c.theorem = "dsm-pointwise";
  c.lhs = lhs_d1;
  c.prefactor = std::pow(R, 1.5) * (1.0 + std::sqrt(in.grad_s.value));
  c.rhs_terms = {{"early_stopping", std::sqrt(in.transfer.epsilon)},
                 {"reference", c.prefactor * R * decay * in.d1_reference.value},
                 {"score", c.prefactor * std::sqrt(tr.e_nn_prime)}};
  c.rhs_upper = std::sqrt(in.transfer.epsilon) +
                std::pow(R, 1.5) * (1.0 + std::sqrt(in.grad_s.value + in.grad_s.uncertainty)) *
                    (R * decay * in.d1_reference.upper() + std::sqrt(tr.e_nn_prime));
  c.provenance = {{"transfer_inputs", in.transfer}, {"transfer", tr},
                  {"grad_s", {{"value", in.grad_s.value}, {"uncertainty", in.grad_s.uncertainty}}},
                  {"R", R}, {"omega", in.omega}, {"d1_reference", in.d1_reference.value}};
  finalize(c);
  return c;
}

void to_json(nlohmann::json& j, const DsmRun& r) {
  j = nlohmann::json{{"transfer_inputs", r.transfer_inputs},
                     {"transfer", r.transfer},
                     {"direct_esm", r.direct_esm >= 0.0 ? nlohmann::json(r.direct_esm) : nlohmann::json()},
                     {"norms", {{"c0", r.norms.c0}, {"c1", r.norms.c1}, {"ct", r.norms.ct}, {"c2", r.norms.c2},
                                {"c2x", r.norms.c2x}, {"c2_norm", r.norms.c2_norm()},
                                {"c2_space_norm", r.norms.c2_space_norm()}, {"uncertainty", r.norms.uncertainty},
                                {"unstable", r.norms.unstable}, {"grid_n", r.norms.grid_n}}},
                     {"training", {{"final_loss", r.training.final_loss}, {"final_se", r.training.final_se},
                                   {"smoothed_loss", r.training.smoothed_loss},
                                   {"steps", r.training.trace.size()}}},
                     {"omega", r.omega},
                     {"certificate", r.certificate}};
}

DsmRun certify_dsm(const TargetDistribution& pi, const std::vector<TorusPoint>& sample, const DsmRunConfig& cfg) {
  if (!pi.has_density()) fail(ErrorKind::no_density, "pointwise DSM certificate needs a target with a density");
  if (sample.empty()) fail(ErrorKind::invalid_input, "empty training sample");
  if (!(cfg.epsilon > 0.0) || !(cfg.T > cfg.epsilon)) fail(ErrorKind::invalid_input, "need 0 < epsilon < T");
  const TorusDomain& dom = pi.domain();
  const GridSpec grid(cfg.grid_n);
  const auto emp = TargetDistribution::empirical(dom, sample);

  PeriodicNetScore net(dom, cfg.shape, cfg.epsilon, cfg.T, cfg.seed);
  TrainConfig tc = cfg.train;
  tc.epsilon = cfg.epsilon;
  tc.horizon = cfg.T;
  tc.seed = cfg.seed;
  DsmRun r;
  r.training = train_dsm(net, sample, tc);
  const ScoreField field = net.as_field();

  ObjectiveOptions oo;
  oo.grid_n = mollify_grid(dom, cfg.epsilon).n();
  const double e_nn = esm_objective(field, HeatFlowLaw(emp), cfg.epsilon, cfg.T, oo).value;
  if (cfg.direct_esm) r.direct_esm = esm_objective(field, HeatFlowLaw(pi), cfg.epsilon, cfg.T, oo).value;

  const auto mo = mollify(emp, cfg.epsilon);
  double delta = mo.delta;
  const auto pe = HeatFlowLaw(pi).on_grid(cfg.epsilon, GridSpec(mo.delta_grid_n));
  delta = std::min(delta, *std::min_element(pe.values().begin(), pe.values().end()));
  r.norms = estimate_norms(field, cfg.epsilon, cfg.T, GridSpec(dom.dim() == 1 ? 64 : 16));
  const Measured d1_sample = d1_to_target(ParticleEnsemble(dom, sample, 0.0), pi, grid);

  r.transfer_inputs = {.e_nn = e_nn, .delta = delta, .epsilon = cfg.epsilon, .T = cfg.T,
                       .c2_norm = r.norms.c2_space_norm(), .d1_sample = d1_sample.value};
  r.transfer = dsm_to_esm_transfer(r.transfer_inputs);

  const ContractionFit cf = cfg.contraction ? *cfg.contraction
                                            : contraction_fit(pi, default_contraction_times(dom.radius()), grid);
  r.omega = cf.omega_lo > 0.0 ? cf.omega_lo : cf.omega;

  if (cfg.generate) {
    SdeConfig sde = cfg.sde;
    sde.horizon = cfg.T;
    const auto path = simulate_reverse(field, sde, TargetDistribution::uniform(dom), cfg.epsilon);
    r.lhs_d1 = d1_to_target(path.final(), pi, grid);
  }
  DsmPointwiseInputs in;
  in.transfer = r.transfer_inputs;
  in.grad_s = {r.norms.c1, r.norms.c1 * r.norms.uncertainty, r.norms.grid_n};
  in.R = dom.radius();
  in.omega = r.omega;
  in.d1_reference = measured(w1_grid(HeatFlowLaw(pi).on_grid(0.0, grid), GridDensity::uniform(dom, grid)));
  r.certificate = dsm_pointwise_certificate(in, r.lhs_d1);
  r.certificate.provenance["seed"] = cfg.seed;
  r.certificate.provenance["N"] = sample.size();
  r.certificate.provenance["train_steps"] = tc.steps;
  r.certificate.provenance["sde"] = {{"dt", cfg.sde.dt}, {"particles", cfg.sde.particles}, {"seed", cfg.sde.seed}};
  r.certificate.provenance["reference_grid_n"] = grid.n();
  r.certificate.provenance["delta_grid_n"] = mo.delta_grid_n;
  r.certificate.provenance["d1_sample_bound"] = d1_sample.bound;
  return r;
}

// ---- averaged DSM -----------------------------------------------------------

void to_json(nlohmann::json& j, const AverageDsmResult& r) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : r.trials)
    trials.push_back({{"seed", t.seed}, {"lhs", t.lhs}, {"e_nn", t.e_nn}, {"c2_norm", t.c2_norm},
                      {"over_cap", t.over_cap}});
  j = nlohmann::json{{"trials", trials}, {"dropped", r.dropped},       {"mean", r.mean},
                     {"se", r.se},       {"A", r.A},                   {"e_nn", r.e_nn},
                     {"e_nn_prime", r.e_nn_prime}, {"certificate", r.certificate},
                     {"minimal_T", r.minimal_T}};
}

AverageDsmResult average_dsm_experiment(const TargetDistribution& pi, const AverageDsmConfig& cfg) {
  if (cfg.trials < 8) fail(ErrorKind::configuration, "average DSM needs at least 8 trials");
  if (cfg.N == 0) fail(ErrorKind::invalid_input, "sample size must be positive");
  if (!(cfg.epsilon > 0.0) || !(cfg.T > cfg.epsilon))
    fail(ErrorKind::invalid_input, "need 0 < epsilon < T");
  const TorusDomain& dom = pi.domain();
  const GridSpec grid(cfg.grid_n);
  const GridSpec norm_grid(dom.dim() == 1 ? 64 : 16);
  AverageDsmResult out;

  for (int k = 0; k < cfg.trials; ++k) {
    AverageDsmTrial t;
    t.seed = splitmix64(cfg.seed + 0x51ed27ULL * static_cast<std::uint64_t>(k + 1));
    const auto sample = pi.sample(cfg.N, t.seed);
    std::optional<ScoreField> field;
    if (cfg.exact_control) {
      field = ScoreField::exact(HeatFlowLaw(pi), cfg.T);
    } else {
      PeriodicNetScore net(dom, cfg.shape, cfg.epsilon, cfg.T, t.seed);
      TrainConfig tc = cfg.train;
      tc.epsilon = cfg.epsilon;
      tc.horizon = cfg.T;
      tc.seed = t.seed;
      try {
        train_dsm(net, sample, tc);
      } catch (const TrainingDiverged& e) {
        out.dropped.push_back("trial " + std::to_string(k) + ": " + e.what());
        continue;
      }
      field = net.as_field();
      ObjectiveOptions oo;
      oo.grid_n = mollify_grid(dom, cfg.epsilon).n();
      t.e_nn = esm_objective(*field, HeatFlowLaw(TargetDistribution::empirical(dom, sample)), cfg.epsilon, cfg.T, oo)
                   .value;
    }
    t.c2_norm = estimate_norms(*field, cfg.epsilon, cfg.T, norm_grid).c2_space_norm();
    SdeConfig sde = cfg.sde;
    sde.horizon = cfg.T;
    sde.seed = t.seed;
    const auto path = simulate_reverse(*field, sde, TargetDistribution::uniform(dom), cfg.epsilon);
    t.lhs = d1_to_target(path.final(), pi, grid).value;
    out.trials.push_back(t);
  }
  if (out.trials.size() < 2) fail(ErrorKind::insufficient_data, "fewer than two trials survived training");

  const double n = static_cast<double>(out.trials.size());
  double s = 0.0, s2 = 0.0, a = 0.0;
  for (const auto& t : out.trials) {
    s += t.lhs;
    s2 += t.lhs * t.lhs;
    a = std::max(a, t.c2_norm);
    out.e_nn = std::max(out.e_nn, t.e_nn);
  }
  out.mean = s / n;
  out.se = std::sqrt(std::max(0.0, s2 / n - out.mean * out.mean) / (n - 1));
  out.A = cfg.c2_cap > 0.0 ? cfg.c2_cap : a;
  for (auto& t : out.trials) t.over_cap = t.c2_norm > out.A;

  const double R = dom.radius(), d = dom.dim(), T = cfg.T;
  out.e_nn_prime = cfg.epsilon + out.e_nn +
                   std::pow(static_cast<double>(cfg.N), -1.0 / (2 * d)) *
                       (T * R * out.A * out.A + (1.0 + d * std::log(R)) / std::sqrt(T));
  auto& c = out.certificate;
  c.theorem = "dsm-average";
  c.lhs = {out.mean, 2.0 * out.se, "trial-mean"};
  c.prefactor = std::pow(R, 1.5) * (1.0 + std::sqrt(out.A));
  c.rhs_terms = {{"reference", c.prefactor * R * R * std::exp(-cfg.omega * T / (R * R))},
                 {"score", c.prefactor * std::sqrt(T * out.e_nn_prime)}};
  c.provenance = {{"N", cfg.N},           {"epsilon", cfg.epsilon}, {"T", T},
                  {"trials", cfg.trials}, {"seed", cfg.seed},       {"exact_control", cfg.exact_control},
                  {"omega", cfg.omega},   {"grid_n", cfg.grid_n},   {"target", pi.kind_name()}};
  finalize(c);
  // 2 C R^-d e^{-omega T / R^2} <= 1 / (2 vol) with vol = R^d, together with T >= R^2.
  const double cc = cfg.fitted_constant;
  out.minimal_T = std::max(R * R, cc > 0.25 ? R * R / cfg.omega * std::log(4.0 * cc) : 0.0);
  return out;
}

// ---- expectations -------------------------------------------------------------

ExpectationBound expectation_error_bound(double lipschitz, const BoundCertificate& c, double constant) {
  require_nonnegative(lipschitz, "Lipschitz constant");
  return {lipschitz, lipschitz * c.lhs.value, lipschitz * constant * c.rhs};
}

double lipschitz_estimate(const std::function<double(const TorusPoint&)>& h, const TorusDomain& domain,
                          const GridSpec& grid) {
  const GridFunction f = GridFunction::tabulate(domain, grid, h);
  const int n = grid.n();
  const double step = grid.spacing(domain);
  double best = 0.0;
  if (domain.dim() == 1) {
    for (int i = 0; i < n; ++i) best = std::max(best, std::abs(f[(i + 1) % n] - f[i]) / step);
    return best;
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double v = f[static_cast<std::size_t>(i) * n + j];
      best = std::max(best, std::abs(f[static_cast<std::size_t>((i + 1) % n) * n + j] - v) / step);
      best = std::max(best, std::abs(f[static_cast<std::size_t>(i) * n + (j + 1) % n] - v) / step);
    }
  return best;
}

// ---- sweep statistics ---------------------------------------------------------

void to_json(nlohmann::json& j, const LineFit& f) {
  j = nlohmann::json{{"slope", f.slope},
                     {"intercept", f.intercept},
                     {"slope_se", f.slope_se},
                     {"slope_ci", {finite_or_null(f.slope_lo), finite_or_null(f.slope_hi)}},
                     {"points", f.points}};
}

LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) fail(ErrorKind::invalid_input, "fit_line: size mismatch");
  if (x.size() < 2) fail(ErrorKind::insufficient_data, "fit_line needs two points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (!(sxx > 0.0)) fail(ErrorKind::insufficient_data, "fit_line: abscissae coincide");
  LineFit f;
  f.points = x.size();
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double sr = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - f.intercept - f.slope * x[i];
    sr += r * r;
  }
  f.slope_se = x.size() > 2 ? std::sqrt(sr / (n - 2) / sxx) : std::numeric_limits<double>::infinity();
  const double q = t975(x.size() - 2);
  f.slope_lo = f.slope - q * f.slope_se;
  f.slope_hi = f.slope + q * f.slope_se;
  return f;
}

LineFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) fail(ErrorKind::invalid_input, "fit_loglog: size mismatch");
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] > 0.0 && y[i] > 0.0) {
      lx.push_back(std::log(x[i]));
      ly.push_back(std::log(y[i]));
    }
  return fit_line(lx, ly);
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * (i + j) + 1.0;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) fail(ErrorKind::invalid_input, "spearman needs paired samples");
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double m = (n + 1) / 2;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - m) * (rb[i] - m);
    saa += (ra[i] - m) * (ra[i] - m);
    sbb += (rb[i] - m) * (rb[i] - m);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

double constant_spread(const std::vector<BoundCertificate>& certs) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto& c : certs) {
    if (!std::isfinite(c.fitted_constant) || c.fitted_constant <= 0.0) continue;
    lo = std::min(lo, c.fitted_constant);
    hi = std::max(hi, c.fitted_constant);
  }
  if (hi == 0.0) fail(ErrorKind::insufficient_data, "no positive fitted constants");
  return hi / lo;
}

}  // namespace tsgm
