#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <thread>

#include "tsgm/certificates.hpp"
#include "tsgm/cli.hpp"
#include "tsgm/heat_kernel.hpp"
#include "tsgm/rng.hpp"

#ifndef TSGM_VERSION
#define TSGM_VERSION "0.0.0"
#endif
#ifndef TSGM_BUILD_ID
#define TSGM_BUILD_ID "unknown"
#endif

namespace tsgm::cli {

using nlohmann::json;

int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::configuration:
    case ErrorKind::invalid_input:
    case ErrorKind::domain_mismatch:
    case ErrorKind::no_density:
      return exit_config;
    case ErrorKind::solver_diverged:
      return exit_solver_diverged;
    case ErrorKind::training_diverged:
      return exit_training_diverged;
    case ErrorKind::io:
      return exit_io;
    default:
      return exit_other;
  }
}

std::string version() { return TSGM_VERSION; }
std::string build_id() { return TSGM_BUILD_ID; }

namespace {

using Point = std::map<std::string, double>;

// ---- config readers -----------------------------------------------------------

TorusDomain domain_of(const json& cfg) { return TorusDomain(cfg["domain"]["R"].get<double>(), cfg["domain"]["d"].get<int>()); }

TorusPoint point_of(const TorusDomain& dom, const json& v) {
  if (v.is_number()) return wrap(dom, v.get<double>());
  return dom.dim() == 1 ? wrap(dom, v[0].get<double>()) : wrap(dom, Vec{v[0].get<double>(), v[1].get<double>()});
}

std::vector<TorusPoint> points_of(const TorusDomain& dom, const json& arr) {
  std::vector<TorusPoint> out;
  for (const auto& v : arr) out.push_back(point_of(dom, v));
  return out;
}

TargetDistribution target_of(const json& cfg) {
  const TorusDomain dom = domain_of(cfg);
  const json& t = cfg["target"];
  const std::string type = t["type"];
  if (type == "uniform") return TargetDistribution::uniform(dom);
  if (type == "empirical") return TargetDistribution::empirical(dom, points_of(dom, t["points"]));
  return TargetDistribution::mixture(dom, t["weights"].get<std::vector<double>>(), points_of(dom, t["means"]),
                                     t["variances"].get<std::vector<double>>());
}

double at(const Point& p, const std::string& axis, double fallback) {
  const auto it = p.find(axis);
  return it == p.end() ? fallback : it->second;
}

int auto_grid(const json& cfg, int for_d1, int for_d2) {
  const int n = cfg.contains("grid") ? cfg["grid"]["n"].get<int>() : 0;
  if (n > 0) return n;
  return cfg["domain"]["d"].get<int>() == 1 ? for_d1 : for_d2;
}

struct ScoreChoice {
  ScoreField field;
  double g_scale = 1.0;
};

ScoreChoice score_of(const json& cfg, const HeatFlowLaw& flow, double horizon, double delta_p) {
  const json& s = cfg["score"];
  const std::string type = s["type"];
  if (type == "zero") return {ScoreField::zero(flow.domain(), horizon)};
  auto exact = ScoreField::exact(flow, horizon);
  if (type == "exact") return {exact};
  const Direction g = s["direction"] == "mode" ? Direction::mode(flow.domain(), s["mode"].get<int>())
                                               : Direction::constant(0);
  auto p = perturb(exact, g, delta_p);
  return {p.field, p.g_scale};
}

NetShape shape_of(const json& cfg) {
  const json& t = cfg["train"];
  return {t["fourier_order"].get<int>(), t["width"].get<int>(), t["time_features"].get<int>()};
}

TrainConfig train_of(const json& cfg) {
  const json& t = cfg["train"];
  TrainConfig c;
  c.steps = t["steps"];
  c.batch = t["batch"];
  c.learning_rate = t["learning_rate"];
  c.momentum = t["momentum"];
  c.final_lr_fraction = t["final_lr_fraction"];
  c.clip_norm = t["clip_norm"];
  c.antithetic = t["antithetic"];
  c.log_uniform_time = t["log_uniform_time"];
  c.eval_samples = t["eval_samples"];
  return c;
}

SdeConfig sde_of(const json& cfg, double T, std::uint64_t seed, int workers) {
  SdeConfig c;
  c.horizon = T;
  c.dt = cfg["sde"]["dt"];
  c.particles = cfg["sde"]["particles"];
  c.seed = seed;
  c.workers = workers;
  return c;
}

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

json num_or_null(double x) { return std::isfinite(x) ? json(x) : json(); }

// ---- sweeps and series ----------------------------------------------------------

std::vector<Point> sweep_points(const json& cfg) {
  std::vector<Point> pts{Point{}};
  if (!cfg.contains("sweep")) return pts;
  for (auto it = cfg["sweep"].begin(); it != cfg["sweep"].end(); ++it) {
    std::vector<Point> next;
    for (const auto& p : pts)
      for (const auto& v : it.value()) {
        Point q = p;
        q[it.key()] = v.get<double>();
        next.push_back(q);
      }
    pts = std::move(next);
  }
  return pts;
}

struct Series {
  std::vector<std::string> columns;
  std::vector<std::string> units;
  std::vector<std::vector<double>> rows;
};

json series_json(const Series& s) {
  json rows = json::array();
  for (const auto& r : s.rows) {
    json row = json::array();
    for (double v : r) row.push_back(num_or_null(v));
    rows.push_back(row);
  }
  return {{"columns", s.columns}, {"units", s.units}, {"rows", rows}};
}

double field(const json& rec, const std::string& key) {
  const json* v = &rec;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!v->is_object() || !v->contains(part)) return nan();
    v = &(*v)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return v->is_number() ? v->get<double>() : nan();
}

/// Rows from the successful runs, reading dotted keys of each record.
Series collect(const json& runs, std::vector<std::string> columns, std::vector<std::string> keys,
               std::vector<std::string> units) {
  Series s{std::move(columns), std::move(units), {}};
  for (const auto& r : runs) {
    if (!r.contains("result")) continue;
    std::vector<double> row;
    for (const auto& k : keys) row.push_back(field(r["result"], k));
    s.rows.push_back(row);
  }
  return s;
}

std::vector<double> column(const Series& s, std::size_t c) {
  std::vector<double> out;
  for (const auto& r : s.rows) out.push_back(r[c]);
  return out;
}

json certificate_named(const json& certs, const std::string& theorem) {
  for (const auto& c : certs)
    if (c["theorem"] == theorem) return c;
  return json::object();
}

// ---- kinds ----------------------------------------------------------------------

struct Context {
  json cfg;
  std::uint64_t seed = 1;
  int inner_workers = 1;
  std::optional<ContractionFit> contraction;
};

using PointFn = std::function<json(const Context&, const Point&, std::uint64_t)>;
using FinishFn = std::function<void(const Context&, json& report)>;

struct Kind {
  std::function<void(Context&)> prepare;
  PointFn point;
  FinishFn finish;
};

void prepare_contraction(Context& c) {
  const auto pi = target_of(c.cfg);
  const TorusDomain dom = pi.domain();
  c.contraction = contraction_fit(pi, default_contraction_times(dom.radius()), GridSpec(auto_grid(c.cfg, 1024, 64)));
}

json identities_point(const Context& c, const Point&, std::uint64_t) {
  const json& p = c.cfg["params"];
  const auto pi = target_of(c.cfg);
  const HeatFlowLaw flow(pi);
  const double lo = p["s_lo"], hi = p["s_hi"];
  ObjectiveOptions oo;
  oo.grid_n = c.cfg["grid"]["n"];
  oo.gl_points = p["gl_points"];
  const auto sc = score_of(c.cfg, flow, hi, c.cfg["score"]["delta_p"]);
  const auto id = verify_identities(sc.field, flow, lo, hi, oo);
  json out{{"identity", id}, {"identity_relative", id.relative}, {"fisher_gap", id.fisher.relative_gap}};
  if (p["finite_sample"]) {
    const double eps = p["epsilon"], T = p["T"];
    const auto sample = pi.sample(c.cfg["sample"]["N"].get<std::size_t>(), c.cfg["sample"]["seed"]);
    const std::vector<ScoreField> scores = {score_of(c.cfg, flow, T, c.cfg["score"]["delta_p"]).field,
                                            ScoreField::zero(pi.domain(), T),
                                            perturb(ScoreField::exact(flow, T), Direction::mode(pi.domain(), 1), 0.5).field};
    json fs = json::array();
    double lo_off = std::numeric_limits<double>::infinity(), hi_off = -lo_off, scale = 0.0;
    for (const auto& s : scores) {
      const auto r = verify_finite_sample(s, sample, eps, T, oo);
      fs.push_back(r);
      lo_off = std::min(lo_off, r.offset);
      hi_off = std::max(hi_off, r.offset);
      scale = std::max(scale, std::abs(r.offset));
    }
    out["finite_sample"] = fs;
    out["offset_spread"] = scale > 0.0 ? (hi_off - lo_off) / scale : hi_off - lo_off;
  }
  return out;
}

void identities_finish(const Context&, json& report) {
  Series s{{"score", "offset", "predicted_offset", "residual"}, {"index", "objective", "objective", "objective"}, {}};
  for (const auto& r : report["runs"]) {
    if (!r.contains("result") || !r["result"].contains("finite_sample")) continue;
    double k = 0;
    for (const auto& f : r["result"]["finite_sample"])
      s.rows.push_back({k++, f["offset"].get<double>(), f["predicted_offset"].get<double>(), f["residual"].get<double>()});
  }
  report["series"]["finite-sample"] = series_json(s);
  if (!report["runs"].empty() && report["runs"][0].contains("result")) {
    const json& r = report["runs"][0]["result"];
    report["fits"]["identity_relative"] = r["identity_relative"];
    report["fits"]["fisher_gap"] = r["fisher_gap"];
    if (r.contains("offset_spread")) report["fits"]["offset_spread"] = r["offset_spread"];
  }
}

json contraction_point(const Context& c, const Point&, std::uint64_t) {
  const auto pi = target_of(c.cfg);
  const double R = pi.domain().radius();
  auto times = c.cfg["params"]["times"].get<std::vector<double>>();
  if (times.empty()) times = default_contraction_times(R);
  const auto f = contraction_fit(pi, times, GridSpec(auto_grid(c.cfg, 1024, 64)), c.cfg["params"]["floor"]);
  const double target = 4 * M_PI * M_PI;
  return {{"fit", f}, {"omega", f.omega}, {"rate", f.rate}, {"relative_error", std::abs(f.omega / target - 1.0)}};
}

void contraction_finish(const Context&, json& report) {
  Series s{{"t", "d1", "used"}, {"time", "length", "flag"}, {}};
  if (!report["runs"].empty() && report["runs"][0].contains("result")) {
    const json& r = report["runs"][0]["result"];
    const json& f = r["fit"];
    for (std::size_t i = 0; i < f["times"].size(); ++i)
      s.rows.push_back({f["times"][i].get<double>(), f["d1"][i].get<double>(), f["used"][i].get<bool>() ? 1.0 : 0.0});
    report["fits"]["contraction"] = {{"rate", r["rate"]}, {"omega", r["omega"]}, {"omega_ci", f["omega_ci"]}, {"r_squared", f["r_squared"]},
                                     {"relative_error", r["relative_error"]}};
  }
  report["series"]["contraction"] = series_json(s);
}

json wup_point(const Context& c, const Point& pt, std::uint64_t) {
  const json& p = c.cfg["params"];
  const auto pi = target_of(c.cfg);
  const TorusDomain dom = pi.domain();
  const double T = p["T"];
  const double delta = at(pt, "delta_p", c.cfg["score"]["delta_p"]);
  const HeatFlowLaw flow(pi);
  const auto b1 = ScoreField::exact(flow, T).reverse_drift();
  const auto sc = score_of(c.cfg, flow, T, delta);
  const GridSpec grid(auto_grid(c.cfg, 256, 64));
  const GridDensity m0 = p["initial"] == "target" ? flow.on_grid(0.0, grid) : GridDensity::uniform(dom, grid);
  const auto run = wup_experiment(b1, sc.field.reverse_drift(), m0, m0, T, p["steps"]);
  json certs = run.certificates;
  return {{"delta_p", delta}, {"g_scale", sc.g_scale}, {"inputs", run.inputs},
          {"lhs_d1", run.lhs_d1}, {"lhs_l1", run.lhs_l1}, {"certificates", certs},
          {"torus", certificate_named(certs, "wup-d1-torus")}};
}

void add_spread(json& report, const Series& s, std::size_t col) {
  std::vector<double> c;
  for (double v : column(s, col))
    if (std::isfinite(v) && v > 0.0) c.push_back(v);
  if (c.size() >= 2) report["fits"]["constant_spread"] = *std::max_element(c.begin(), c.end()) / *std::min_element(c.begin(), c.end());
}

void add_loglog(json& report, const std::string& name, const std::vector<double>& x, const std::vector<double>& y) {
  std::size_t usable = 0;
  for (std::size_t i = 0; i < x.size(); ++i) usable += x[i] > 0.0 && y[i] > 0.0;
  if (usable >= 3) report["fits"][name] = fit_loglog(x, y);
}

void wup_finish(const Context&, json& report) {
  const Series s = collect(report["runs"], {"delta_p", "lhs", "rhs_term", "fitted_C"},
                           {"delta_p", "torus.lhs.value", "torus.rhs", "torus.fitted_constant"},
                           {"score", "length", "length", "ratio"});
  report["series"]["wup"] = series_json(s);
  add_loglog(report, "lhs_vs_delta_p", column(s, 0), column(s, 1));
  add_spread(report, s, 3);
  const auto rhs = column(s, 2);
  if (rhs.size() >= 2 && *std::min_element(rhs.begin(), rhs.end()) > 0.0)
    report["fits"]["rhs_ratio"] = *std::max_element(rhs.begin(), rhs.end()) / *std::min_element(rhs.begin(), rhs.end());
}

json esm_point(const Context& c, const Point& pt, std::uint64_t seed) {
  const auto pi = target_of(c.cfg);
  const double T = c.cfg["params"]["T"];
  const double delta = at(pt, "delta_p", c.cfg["score"]["delta_p"]);
  const auto sc = score_of(c.cfg, HeatFlowLaw(pi), T, delta);
  EsmRunOptions o;
  o.sde = sde_of(c.cfg, T, seed, c.inner_workers);
  o.grid_n = c.cfg["grid"]["n"];
  o.contraction = c.contraction;
  const auto r = certify_esm(sc.field, pi, T, o);
  json certs = r.certificates;
  return {{"delta_p", delta}, {"g_scale", sc.g_scale}, {"inputs", r.inputs}, {"lhs_d1", r.lhs_d1},
          {"certificates", certs}, {"d1_form", certificate_named(certs, "esm-d1")}};
}

void esm_finish(const Context&, json& report) {
  const Series s = collect(report["runs"], {"delta_p", "lhs", "lhs_err", "rhs", "fitted_C"},
                           {"delta_p", "lhs_d1.value", "lhs_d1.bound", "d1_form.rhs", "d1_form.fitted_constant"},
                           {"score", "length", "length", "length", "ratio"});
  report["series"]["esm"] = series_json(s);
  add_loglog(report, "lhs_vs_delta_p", column(s, 0), column(s, 1));
  add_spread(report, s, 4);
}

json dsm_point(const Context& c, const Point& pt, std::uint64_t seed) {
  const json& p = c.cfg["params"];
  const auto pi = target_of(c.cfg);
  const auto N = static_cast<std::size_t>(at(pt, "N", c.cfg["sample"]["N"]));
  DsmRunConfig d;
  d.epsilon = at(pt, "epsilon", p["epsilon"]);
  d.T = p["T"];
  d.train = train_of(c.cfg);
  d.train.steps = static_cast<int>(at(pt, "steps", d.train.steps));
  d.shape = shape_of(c.cfg);
  d.sde = sde_of(c.cfg, d.T, seed, c.inner_workers);
  d.grid_n = auto_grid(c.cfg, 1024, 64);
  d.contraction = c.contraction;
  d.seed = seed;
  d.direct_esm = p["direct_esm"];
  d.generate = p["generate"];
  const auto sample = pi.sample(N, c.cfg["sample"]["seed"].get<std::uint64_t>() + N);
  const auto r = certify_dsm(pi, sample, d);
  return {{"N", N}, {"steps", d.train.steps}, {"epsilon", d.epsilon}, {"run", r}};
}

void dsm_finish(const Context&, json& report) {
  const Series s = collect(report["runs"], {"N", "steps", "epsilon", "e_nn", "e_nn_prime", "direct_esm", "lhs", "rhs"},
                           {"N", "steps", "epsilon", "run.transfer.e_nn", "run.transfer.e_nn_prime", "run.direct_esm",
                            "run.certificate.lhs.value", "run.certificate.rhs"},
                           {"count", "count", "time", "objective", "objective", "objective", "length", "length"});
  report["series"]["dsm"] = series_json(s);
  std::vector<double> a, b;
  for (const auto& r : s.rows)
    if (std::isfinite(r[4]) && std::isfinite(r[5])) {
      a.push_back(r[4]);
      b.push_back(r[5]);
    }
  if (a.size() >= 3) report["fits"]["transfer_spearman"] = spearman(a, b);
}

json early_stopping_point(const Context& c, const Point& pt, std::uint64_t) {
  const auto pi = target_of(c.cfg);
  const TorusDomain dom = pi.domain();
  const double eps = at(pt, "epsilon", c.cfg["params"]["epsilon"]);
  if (!(eps > 0.0)) fail(ErrorKind::invalid_input, "sweep.epsilon: values must be > 0");
  const int n = c.cfg["grid"]["n"];
  json out{{"epsilon", eps}};
  if (pi.is_uniform()) {
    out.update({{"d1", 0.0}, {"d1_err", 0.0}, {"method", "exact"}, {"grid_n", 0}});
    return out;
  }
  if (!pi.has_density()) {
    const GridSpec g = n > 0 ? GridSpec(n) : dom.dim() == 1 ? mollify_grid(dom, eps) : GridSpec(64);
    const auto mo = mollify(pi, eps, g);
    const auto& pts = std::get<Empirical>(pi.variant()).points;
    const double h = mo.density.grid().spacing(dom);
    if (dom.dim() == 1) {
      const auto r = w1_circle(dom, as_measure(std::span<const TorusPoint>(pts)), as_measure(mo.density));
      out.update({{"d1", r.distance}, {"d1_err", r.certified_bound + 0.5 * h}, {"method", to_string(r.method)}});
    } else {
      const auto a = as_measure(std::span<const TorusPoint>(pts));
      const auto b = as_measure(mo.density);
      const auto lp = solve_transport_lp(a.weights, b.weights, torus_cost(dom, a.points, b.points));
      out.update({{"d1", lp.primal}, {"d1_err", (lp.primal - lp.dual) + std::sqrt(2.0) * 0.5 * h}, {"method", "grid-lp"}});
    }
    out["grid_n"] = mo.density.grid().n();
    return out;
  }
  const GridSpec g(n > 0 ? n : (dom.dim() == 1 ? 1024 : 32));
  const HeatFlowLaw flow(pi);
  const auto r = w1_grid(flow.on_grid(0.0, g), flow.on_grid(eps, g));
  out.update({{"d1", r.distance},
              {"d1_err", r.certified_bound + std::sqrt(static_cast<double>(dom.dim())) * g.spacing(dom)},
              {"method", to_string(r.method)},
              {"grid_n", g.n()}});
  return out;
}

void early_stopping_finish(const Context&, json& report) {
  const Series s = collect(report["runs"], {"epsilon", "d1", "d1_err"}, {"epsilon", "d1", "d1_err"},
                           {"time", "length", "length"});
  report["series"]["early-stopping"] = series_json(s);
  add_loglog(report, "d1_vs_epsilon", column(s, 0), column(s, 1));
}

json memorization_point(const Context& c, const Point& pt, std::uint64_t seed) {
  const json& p = c.cfg["params"];
  const auto pi = target_of(c.cfg);
  const TorusDomain dom = pi.domain();
  const double eps = p["epsilon"], T = p["T"];
  std::vector<TorusPoint> sample;
  if (pi.has_density()) {
    const auto N = static_cast<std::size_t>(at(pt, "N", c.cfg["sample"]["N"]));
    sample = pi.sample(N, c.cfg["sample"]["seed"]);
  } else {
    sample = std::get<Empirical>(pi.variant()).points;
  }
  PeriodicNetScore net(dom, shape_of(c.cfg), eps, T, seed);
  TrainConfig tc = train_of(c.cfg);
  tc.epsilon = eps;
  tc.horizon = T;
  tc.seed = seed;
  const auto tr = train_dsm(net, sample, tc);
  const auto gen = simulate_reverse(net.as_field(), sde_of(c.cfg, T, seed, c.inner_workers),
                                    TargetDistribution::uniform(dom), eps)
                       .final();
  const auto mem = w1_empirical(gen, ParticleEnsemble(dom, sample, 0.0));
  json out{{"N", sample.size()},
           {"d1_sample", {{"value", mem.distance}, {"bound", mem.certified_bound}, {"method", to_string(mem.method)}}},
           {"d1_sample_over_R", mem.distance / dom.radius()},
           {"training", {{"final_loss", tr.final_loss}, {"final_se", tr.final_se}, {"smoothed_loss", tr.smoothed_loss}}}};
  if (pi.has_density()) {
    const GridSpec g(auto_grid(c.cfg, 1024, 64));
    out["d1_target"] = d1_to_target(gen, pi, g);
    out["d1_data"] = d1_to_target(ParticleEnsemble(dom, sample, 0.0), pi, g);
  }
  return out;
}

void memorization_finish(const Context&, json& report) {
  const Series s = collect(report["runs"], {"N", "d1_sample", "d1_target", "d1_data"},
                           {"N", "d1_sample.value", "d1_target.value", "d1_data.value"},
                           {"count", "length", "length", "length"});
  report["series"]["memorization"] = series_json(s);
}

json average_point(const Context& c, const Point& pt, std::uint64_t seed) {
  const json& p = c.cfg["params"];
  const auto pi = target_of(c.cfg);
  AverageDsmConfig a;
  a.N = static_cast<std::size_t>(at(pt, "N", p["N"]));
  a.epsilon = p["epsilon"];
  a.T = p["T"];
  a.trials = p["trials"];
  a.train = train_of(c.cfg);
  a.shape = shape_of(c.cfg);
  a.sde = sde_of(c.cfg, a.T, seed, c.inner_workers);
  a.c2_cap = p["c2_cap"];
  a.exact_control = p["exact_control"];
  a.seed = seed;
  a.grid_n = auto_grid(c.cfg, 1024, 64);
  if (c.contraction) a.omega = c.contraction->omega_lo > 0.0 ? c.contraction->omega_lo : c.contraction->omega;
  a.fitted_constant = p["fitted_constant"];
  return {{"N", a.N}, {"result", average_dsm_experiment(pi, a)}};
}

void average_finish(const Context&, json& report) {
  const Series s = collect(report["runs"], {"N", "mean", "se", "e_nn_prime", "rhs"},
                           {"N", "result.mean", "result.se", "result.e_nn_prime", "result.certificate.rhs"},
                           {"count", "length", "length", "objective", "length"});
  report["series"]["average-dsm"] = series_json(s);
  add_loglog(report, "mean_vs_N", column(s, 0), column(s, 1));
}

json bernstein_point(const Context& c, const Point& pt, std::uint64_t) {
  const json& p = c.cfg["params"];
  const TorusDomain dom = domain_of(c.cfg);
  const double R = dom.radius(), T = p["T"];
  const double a = at(pt, "grad_b", p["grad_b"]);
  const GridSpec g(static_cast<int>(at(pt, "n", auto_grid(c.cfg, 256, 64))));
  const DriftField b(dom, [a, R](double, const TorusPoint& x) {
    return Vec{a * R / (2 * M_PI) * std::sin(2 * M_PI * (x[0] / R - 0.1)), 0.0};
  });
  const auto psi = GridFunction::tabulate(dom, g, [R](const TorusPoint& x) {
    return 1.0 + 0.5 * (1.0 + std::sin(2 * M_PI * x[0] / R));
  });
  const int steps = std::max(p["min_steps"].get<int>(), stable_time_steps(b, T, g));
  const auto phi = solve_kbe({b, psi, T, steps});
  const auto r = bernstein_report(phi, b);
  return {{"grad_b", a},
          {"grid_n", g.n()},
          {"time_steps", steps},
          {"bounded_terminal_ratio", r.bounded_terminal_ratio},
          {"lipschitz_terminal_ratio", r.lipschitz_terminal_ratio},
          {"max_grad_phi", r.max_grad_phi},
          {"psi_sup", r.psi_sup},
          {"psi_c1", r.psi_c1},
          {"grad_b_estimate", {{"value", r.grad_b.value}, {"uncertainty", r.grad_b.uncertainty}, {"grid_n", r.grad_b.grid_n}}}};
}

void bernstein_finish(const Context&, json& report) {
  const Series s = collect(report["runs"], {"grad_b", "grid_n", "bounded_ratio", "lipschitz_ratio"},
                           {"grad_b", "grid_n", "bounded_terminal_ratio", "lipschitz_terminal_ratio"},
                           {"inverse_time", "count", "ratio", "ratio"});
  report["series"]["bernstein"] = series_json(s);
  // growth against log(1 + |grad b|) on the finest grid
  double finest = 0.0;
  for (const auto& r : s.rows) finest = std::max(finest, r[1]);
  std::vector<double> x, y;
  std::map<double, std::vector<double>> by_gradient;
  for (const auto& r : s.rows) {
    if (r[1] == finest && r[2] > 0.0) {
      x.push_back(std::log1p(r[0]));
      y.push_back(std::log(r[2]));
    }
    if (r[2] > 0.0) by_gradient[r[0]].push_back(r[2]);
  }
  if (x.size() >= 3) report["fits"]["growth_vs_log1p_grad_b"] = fit_line(x, y);
  double spread = 0.0;
  bool any = false;
  for (const auto& [gb, v] : by_gradient)
    if (v.size() >= 2) {
      any = true;
      spread = std::max(spread, *std::max_element(v.begin(), v.end()) / *std::min_element(v.begin(), v.end()) - 1.0);
    }
  if (any) report["fits"]["refinement_spread"] = spread;
}

const std::map<std::string, Kind>& kinds() {
  static const std::map<std::string, Kind> k = {
      {"identities", {{}, identities_point, identities_finish}},
      {"contraction", {{}, contraction_point, contraction_finish}},
      {"wup-sweep", {{}, wup_point, wup_finish}},
      {"esm-certify", {prepare_contraction, esm_point, esm_finish}},
      {"dsm-pointwise", {prepare_contraction, dsm_point, dsm_finish}},
      {"early-stopping-sweep", {{}, early_stopping_point, early_stopping_finish}},
      {"memorization", {{}, memorization_point, memorization_finish}},
      {"average-dsm", {prepare_contraction, average_point, average_finish}},
      {"bernstein", {{}, bernstein_point, bernstein_finish}},
  };
  return k;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Failure {
  ErrorKind kind = ErrorKind::invalid_input;
  bool library = false;
  std::string message;
};

json failure_json(const Failure& f) {
  return {{"kind", f.library ? to_string(f.kind) : "other"},
          {"message", f.message},
          {"exit_code", f.library ? exit_code(f.kind) : static_cast<int>(exit_other)}};
}

}  // namespace

json run_experiment(const json& config, const RunOptions& opt) {
  json cfg = validate_config(config);
  if (opt.seed) cfg["seed"] = *opt.seed;
  const Kind& kind = kinds().at(cfg["kind"]);
  const auto points = sweep_points(cfg);
  const int workers = std::max(1, opt.workers);

  json report;
  report["format"] = "tsgm-report/1";
  report["kind"] = cfg["kind"];
  report["config"] = cfg;
  report["fits"] = json::object();
  report["series"] = json::object();
  report["environment"] = {{"version", version()}, {"build", build_id()}, {"timestamp", opt.stamp_time ? utc_now() : ""}};

  Context ctx;
  ctx.cfg = cfg;
  ctx.seed = cfg["seed"];
  ctx.inner_workers = points.size() <= 1 ? workers : 1;

  std::optional<Failure> setup_failure;
  try {
    if (kind.prepare) kind.prepare(ctx);
  } catch (const Error& e) {
    setup_failure = Failure{e.kind(), true, e.what()};
  } catch (const std::exception& e) {
    setup_failure = Failure{ErrorKind::invalid_input, false, e.what()};
  }

  std::vector<json> results(points.size());
  std::vector<std::optional<Failure>> failures(points.size());
  if (!setup_failure) {
    std::atomic<std::size_t> next{0};
    auto work = [&] {
      for (std::size_t i; (i = next++) < points.size();) {
        const std::uint64_t seed = splitmix64(ctx.seed + 0x51ed27ULL * (i + 1));
        try {
          results[i] = kind.point(ctx, points[i], seed);
        } catch (const Error& e) {
          failures[i] = Failure{e.kind(), true, e.what()};
        } catch (const std::exception& e) {
          failures[i] = Failure{ErrorKind::invalid_input, false, e.what()};
        }
      }
    };
    const int threads = std::min<int>(workers, static_cast<int>(points.size()));
    std::vector<std::thread> pool;
    for (int t = 1; t < threads; ++t) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
  }

  json runs = json::array();
  std::optional<Failure> first = setup_failure;
  for (std::size_t i = 0; i < points.size(); ++i) {
    json r{{"index", i}, {"point", points[i]}};
    if (failures[i]) {
      r["failed"] = failure_json(*failures[i]);
      if (!first) first = failures[i];
    } else if (!setup_failure) {
      r["result"] = std::move(results[i]);
    }
    runs.push_back(std::move(r));
  }
  report["runs"] = std::move(runs);
  if (ctx.contraction) report["contraction"] = *ctx.contraction;
  try {
    kind.finish(ctx, report);
  } catch (const std::exception& e) {
    if (!first) first = Failure{ErrorKind::invalid_input, false, std::string("summary: ") + e.what()};
  }
  report["status"] = first ? "failed" : "ok";
  if (first) report["failure"] = failure_json(*first);
  return report;
}

int report_status(const json& report) {
  if (report.value("status", "") == "ok") return exit_ok;
  if (report.contains("failure")) return report["failure"].value("exit_code", static_cast<int>(exit_other));
  return exit_other;
}

json report_payload(const json& report) {
  json p = report;
  if (p.contains("environment")) p["environment"].erase("timestamp");
  return p;
}

std::string output_root(const std::string& explicit_dir, const json& config) {
  if (!explicit_dir.empty()) return explicit_dir;
  if (config.contains("output") && !config["output"].value("dir", "").empty()) return config["output"]["dir"];
  if (const char* env = std::getenv("TSGM_OUT"); env && *env) return env;
  return "out";
}

std::string write_report(const json& report, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create output directory " + dir + ": " + ec.message());
  std::string name = report["config"]["output"].value("name", "");
  if (name.empty()) name = report["kind"].get<std::string>();
  const std::string path = (fs::path(dir) / (name + ".json")).string();
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write report " + path);
  out << report.dump(2) << '\n';
  if (!out) fail(ErrorKind::io, "write failed for " + path);
  return path;
}

}  // namespace tsgm::cli
