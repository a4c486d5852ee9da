#include "tsgm/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "tsgm/heat_kernel.hpp"
#include "tsgm/rng.hpp"

namespace tsgm {

namespace {

// P_n(x) and P_n'(x) by the three-term recurrence.
std::pair<double, double> legendre(int n, double x) {
  double p0 = 1.0, p1 = x;
  for (int k = 2; k <= n; ++k) {
    const double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
    p0 = p1;
    p1 = p2;
  }
  return {p1, n * (x * p1 - p0) / (x * x - 1)};
}

}  // namespace

std::vector<std::pair<double, double>> gauss_legendre(int n) {
  if (n < 1) fail(ErrorKind::invalid_input, "Gauss-Legendre needs n >= 1");
  if (n == 1) return {{0.0, 2.0}};
  std::vector<std::pair<double, double>> r(n);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
    for (int it = 0; it < 100; ++it) {
      const auto [p, dp] = legendre(n, x);
      const double dx = p / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    const double dp = legendre(n, x).second;
    const double w = 2.0 / ((1 - x * x) * dp * dp);
    r[i] = {-x, w};
    r[n - 1 - i] = {x, w};
  }
  return r;
}

std::vector<std::pair<double, double>> time_rule(double lo, double hi, int points) {
  if (!(hi >= lo) || lo < 0.0) fail(ErrorKind::invalid_input, "time window must satisfy 0 <= lo <= hi");
  std::vector<std::pair<double, double>> out;
  if (hi == lo) return out;
  const auto gl = gauss_legendre(points);
  int panels = 1;
  if (lo > 0.0 && hi / lo > 10.0) panels = static_cast<int>(std::ceil(std::log10(hi / lo)));
  for (int p = 0; p < panels; ++p) {
    const double a = panels == 1 ? lo : lo * std::pow(hi / lo, static_cast<double>(p) / panels);
    const double b = panels == 1 ? hi : (p + 1 == panels ? hi : lo * std::pow(hi / lo, static_cast<double>(p + 1) / panels));
    for (const auto& [x, w] : gl) out.emplace_back(0.5 * (a + b) + 0.5 * (b - a) * x, 0.5 * (b - a) * w);
  }
  return out;
}

const char* to_string(Estimator e) {
  return e == Estimator::grid_quadrature ? "grid-quadrature" : "monte-carlo";
}

void to_json(nlohmann::json& j, const ObjectiveReport& r) {
  j = nlohmann::json{{"name", r.name},
                     {"value", r.value},
                     {"estimator", to_string(r.estimator)},
                     {"window", {r.s_lo, r.s_hi}},
                     {"grid_n", r.grid_n},
                     {"time_nodes", r.time_nodes},
                     {"components", r.components}};
  if (r.estimator == Estimator::monte_carlo) j["standard_error"] = r.standard_error;
  j["refinement_delta"] = r.refinement_delta >= 0.0 ? nlohmann::json(r.refinement_delta) : nlohmann::json();
}

void to_json(nlohmann::json& j, const FisherReport& r) {
  j = nlohmann::json{{"quadrature", r.quadrature},
                     {"entropy_route", r.entropy_route},
                     {"relative_gap", r.relative_gap},
                     {"grid_n", r.grid_n}};
}

void to_json(nlohmann::json& j, const IdentityReport& r) {
  j = nlohmann::json{{"esm", r.esm}, {"ism", r.ism}, {"fisher", r.fisher},
                     {"residual", r.residual}, {"relative", r.relative}};
}

void to_json(nlohmann::json& j, const FiniteSampleReport& r) {
  j = nlohmann::json{{"dsm", r.dsm},       {"esm", r.esm},
                     {"offset", r.offset}, {"predicted_offset", r.predicted_offset},
                     {"residual", r.residual}, {"relative", r.relative}};
}

namespace {

GridSpec pick_grid(const TorusDomain& dom, double s_lo, const ObjectiveOptions& opt) {
  if (opt.grid_n > 0) return GridSpec(opt.grid_n);
  return mollify_grid(dom, std::max(s_lo, 1e-8));
}

void check_window(const HeatFlowLaw& flow, double lo, double hi, double horizon) {
  if (!(lo >= 0.0 && hi >= lo)) fail(ErrorKind::invalid_input, "window must satisfy 0 <= s_lo <= s_hi");
  if (hi > horizon * (1 + 1e-12)) fail(ErrorKind::invalid_input, "window exceeds the score horizon");
  if (lo == 0.0 && !flow.density_at_zero())
    fail(ErrorKind::no_density, "window starts at s = 0 but the flow has no density there");
}

// Sum over time nodes and grid nodes of w_t h^d f(t, x, flow eval, score).
struct Sums {
  double score_sq = 0, cross = 0, flow_sq = 0, divergence = 0, diff = 0;
};

Sums flow_sums(const ScoreField* score, const HeatFlowLaw& flow, double lo, double hi, const GridSpec& grid,
               int gl, bool need_div, int* nodes) {
  const TorusDomain& dom = flow.domain();
  const GridFunction probe(dom, grid);
  const double cv = probe.cell_volume();
  const auto rule = time_rule(lo, hi, gl);
  if (nodes) *nodes = static_cast<int>(rule.size());
  Sums s;
  for (const auto& [t, wt] : rule) {
    Sums row;
    for (std::size_t k = 0; k < probe.size(); ++k) {
      const auto x = probe.node(k);
      const FlowEval e = flow.evaluate(t, x);
      const double eta = std::exp(e.log_density);
      row.flow_sq += dot(e.score, e.score) * eta;
      if (!score) continue;
      const Vec v = score->evaluate(t, x);
      row.score_sq += dot(v, v) * eta;
      row.cross += -2.0 * dot(v, e.score) * eta;
      const Vec r = v - e.score;
      row.diff += dot(r, r) * eta;
      if (need_div) row.divergence += 2.0 * score->divergence(t, x) * eta;
    }
    const double w = wt * cv;
    s.score_sq += w * row.score_sq;
    s.cross += w * row.cross;
    s.flow_sq += w * row.flow_sq;
    s.divergence += w * row.divergence;
    s.diff += w * row.diff;
  }
  return s;
}

ObjectiveReport make_report(const char* name, double lo, double hi, const GridSpec& g, int nodes) {
  ObjectiveReport r;
  r.name = name;
  r.s_lo = lo;
  r.s_hi = hi;
  r.grid_n = g.n();
  r.time_nodes = nodes;
  return r;
}

}  // namespace

ObjectiveReport esm_objective(const ScoreField& score, const HeatFlowLaw& flow, double s_lo, double s_hi,
                              const ObjectiveOptions& opt) {
  check_window(flow, s_lo, s_hi, score.horizon());
  const GridSpec g = pick_grid(flow.domain(), s_lo, opt);
  int nodes = 0;
  const Sums s = flow_sums(&score, flow, s_lo, s_hi, g, opt.gl_points, false, &nodes);
  ObjectiveReport r = make_report("esm", s_lo, s_hi, g, nodes);
  r.value = s.diff;
  r.components = {{"score_sq", s.score_sq}, {"cross", s.cross}, {"flow_sq", s.flow_sq}};
  if (opt.refine) {
    const Sums f = flow_sums(&score, flow, s_lo, s_hi, GridSpec(2 * g.n()), opt.gl_points, false, nullptr);
    r.refinement_delta = std::abs(f.diff - r.value);
  }
  return r;
}

ObjectiveReport ism_objective(const ScoreField& score, const HeatFlowLaw& flow, double s_lo, double s_hi,
                              const ObjectiveOptions& opt) {
  check_window(flow, s_lo, s_hi, score.horizon());
  const GridSpec g = pick_grid(flow.domain(), s_lo, opt);
  int nodes = 0;
  const Sums s = flow_sums(&score, flow, s_lo, s_hi, g, opt.gl_points, true, &nodes);
  ObjectiveReport r = make_report("ism", s_lo, s_hi, g, nodes);
  r.value = s.score_sq + s.divergence;
  r.components = {{"score_sq", s.score_sq}, {"divergence", s.divergence}};
  if (opt.refine) {
    const Sums f = flow_sums(&score, flow, s_lo, s_hi, GridSpec(2 * g.n()), opt.gl_points, true, nullptr);
    r.refinement_delta = std::abs(f.score_sq + f.divergence - r.value);
  }
  return r;
}

namespace {

// Entropy int eta log eta from pointwise log densities.
double flow_entropy(const HeatFlowLaw& flow, double s, const GridSpec& grid) {
  const GridFunction probe(flow.domain(), grid);
  double h = 0.0;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const double l = flow.evaluate(s, probe.node(k)).log_density;
    h += std::exp(l) * l;
  }
  return h * probe.cell_volume();
}

double dsm_grid(const ScoreField& score, const std::vector<TorusPoint>& sample, double eps, double T,
                const GridSpec& grid, int gl, int* nodes) {
  const TorusDomain& dom = score.domain();
  const GridFunction probe(dom, grid);
  const double cv = probe.cell_volume();
  const auto rule = time_rule(eps, T, gl);
  if (nodes) *nodes = static_cast<int>(rule.size());
  std::vector<Vec> sv(probe.size());
  double total = 0.0;
  for (const auto& [t, wt] : rule) {
    for (std::size_t k = 0; k < probe.size(); ++k) sv[k] = score.evaluate(t, probe.node(k));
    double row = 0.0;
    for (const auto& z : sample) {
      for (std::size_t k = 0; k < probe.size(); ++k) {
        const auto r = wrap(dom, probe.node(k).coords - z.coords);
        const double l = log_heat_kernel(dom, t, r);
        const Vec e = sv[k] - heat_kernel_score(dom, t, r);
        row += dot(e, e) * std::exp(l);
      }
    }
    total += wt * cv * row / static_cast<double>(sample.size());
  }
  return total;
}

}  // namespace

ObjectiveReport dsm_objective(const ScoreField& score, const std::vector<TorusPoint>& sample, double epsilon,
                              double horizon, Estimator estimator, const ObjectiveOptions& opt) {
  if (!(epsilon > 0.0)) fail(ErrorKind::invalid_input, "DSM needs epsilon > 0");
  if (!(horizon >= epsilon)) fail(ErrorKind::invalid_input, "DSM window needs epsilon <= T");
  if (horizon > score.horizon() * (1 + 1e-12)) fail(ErrorKind::invalid_input, "window exceeds the score horizon");
  if (sample.empty()) fail(ErrorKind::invalid_input, "DSM sample is empty");
  const TorusDomain& dom = score.domain();
  if (estimator == Estimator::grid_quadrature) {
    const GridSpec g = pick_grid(dom, epsilon, opt);
    int nodes = 0;
    ObjectiveReport r = make_report("dsm", epsilon, horizon, g, 0);
    r.value = dsm_grid(score, sample, epsilon, horizon, g, opt.gl_points, &nodes);
    r.time_nodes = nodes;
    if (opt.refine)
      r.refinement_delta =
          std::abs(dsm_grid(score, sample, epsilon, horizon, GridSpec(2 * g.n()), opt.gl_points, nullptr) - r.value);
    return r;
  }
  // Log-uniform times with weight t log(T / eps); antithetic noise pairs form one unit.
  ObjectiveReport r = make_report("dsm", epsilon, horizon, GridSpec(8), 0);
  r.grid_n = 0;
  r.estimator = Estimator::monte_carlo;
  if (horizon == epsilon) return r;
  const double lr = std::log(horizon / epsilon);
  const int d = dom.dim();
  double sum = 0.0, sum2 = 0.0;
  const int units = std::max(2, opt.mc_samples / 2);
  for (int i = 0; i < units; ++i) {
    StreamRng rng(opt.seed ^ 0xd5d5d5d5ULL, static_cast<std::uint64_t>(i));
    const auto j = std::min(static_cast<std::size_t>(rng.uniform() * sample.size()), sample.size() - 1);
    const double t = epsilon * std::exp(rng.uniform() * lr);
    Vec xi{0.0, 0.0};
    for (int a = 0; a < d; ++a) xi[a] = std::sqrt(2 * t) * rng.normal();
    double v = 0.0;
    for (double sign : {1.0, -1.0}) {
      const Vec step = sign * xi;
      const Vec e = score.evaluate(t, wrap(dom, sample[j].coords + step)) - heat_kernel_score(dom, t, wrap(dom, step));
      v += 0.5 * t * lr * dot(e, e);
    }
    sum += v;
    sum2 += v * v;
  }
  r.value = sum / units;
  r.standard_error = std::sqrt(std::max(sum2 / units - r.value * r.value, 0.0) / (units - 1));
  r.components = {{"samples", 2.0 * units}};
  return r;
}

FisherReport fisher_term(const HeatFlowLaw& flow, double s_lo, double s_hi, const ObjectiveOptions& opt) {
  if (!(s_lo >= 0.0 && s_hi >= s_lo)) fail(ErrorKind::invalid_input, "window must satisfy 0 <= s_lo <= s_hi");
  if (s_lo == 0.0 && !flow.density_at_zero())
    fail(ErrorKind::no_density, "window starts at s = 0 but the flow has no density there");
  const GridSpec g = pick_grid(flow.domain(), s_lo, opt);
  FisherReport r;
  r.grid_n = g.n();
  if (s_hi == s_lo) return r;
  r.quadrature = flow_sums(nullptr, flow, s_lo, s_hi, g, opt.gl_points, false, nullptr).flow_sq;
  r.entropy_route = flow_entropy(flow, s_lo, g) - flow_entropy(flow, s_hi, g);
  const double m = std::max(std::abs(r.quadrature), std::abs(r.entropy_route));
  r.relative_gap = m > 0.0 ? std::abs(r.quadrature - r.entropy_route) / m : 0.0;
  return r;
}

IdentityReport verify_identities(const ScoreField& score, const HeatFlowLaw& flow, double s_lo, double s_hi,
                                 const ObjectiveOptions& opt) {
  IdentityReport r;
  r.esm = esm_objective(score, flow, s_lo, s_hi, opt);
  r.ism = ism_objective(score, flow, s_lo, s_hi, opt);
  r.fisher = fisher_term(flow, s_lo, s_hi, opt);
  r.residual = r.esm.value - r.ism.value - r.fisher.quadrature;
  r.relative = std::abs(r.residual) / (1.0 + std::abs(r.esm.value));
  return r;
}

FiniteSampleReport verify_finite_sample(const ScoreField& score, const std::vector<TorusPoint>& sample,
                                        double epsilon, double horizon, const ObjectiveOptions& opt) {
  FiniteSampleReport r;
  const TorusDomain& dom = score.domain();
  const HeatFlowLaw flow(TargetDistribution::empirical(dom, sample));
  ObjectiveOptions o = opt;
  if (o.grid_n == 0) o.grid_n = pick_grid(dom, epsilon, opt).n();
  r.dsm = dsm_objective(score, sample, epsilon, horizon, Estimator::grid_quadrature, o);
  r.esm = esm_objective(score, flow, epsilon, horizon, o);
  r.offset = r.dsm.value - r.esm.value;

  // Mean Fisher information of the individual kernels minus that of eta^N.
  const GridFunction probe(dom, GridSpec(o.grid_n));
  double kernel = 0.0;
  for (const auto& [t, wt] : time_rule(epsilon, horizon, o.gl_points)) {
    double row = 0.0;
    for (const auto& z : sample)
      for (std::size_t k = 0; k < probe.size(); ++k) {
        const auto x = wrap(dom, probe.node(k).coords - z.coords);
        const Vec g = heat_kernel_score(dom, t, x);
        row += dot(g, g) * heat_kernel(dom, t, x);
      }
    kernel += wt * probe.cell_volume() * row / static_cast<double>(sample.size());
  }
  r.predicted_offset = kernel - fisher_term(flow, epsilon, horizon, o).quadrature;
  r.residual = r.offset - r.predicted_offset;
  r.relative = std::abs(r.residual) / (1.0 + std::abs(r.dsm.value));
  return r;
}

}  // namespace tsgm
