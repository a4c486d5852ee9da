#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <fstream>
#include <sstream>

#include "tsgm/cli.hpp"

namespace tsgm::cli {

using nlohmann::json;

namespace {

json num(double def, std::optional<double> lo = std::nullopt, bool open_lo = false,
         std::optional<double> hi = std::nullopt) {
  json f{{"type", "number"}, {"default", def}};
  if (lo) f["min"] = *lo;
  if (open_lo) f["exclusive_min"] = true;
  if (hi) f["max"] = *hi;
  return f;
}

json integer(std::int64_t def, std::optional<std::int64_t> lo = std::nullopt,
             std::optional<std::int64_t> hi = std::nullopt) {
  json f{{"type", "integer"}, {"default", def}};
  if (lo) f["min"] = *lo;
  if (hi) f["max"] = *hi;
  return f;
}

json boolean(bool def) { return {{"type", "boolean"}, {"default", def}}; }

json choice(std::vector<std::string> values, const std::string& def) {
  return {{"type", "string"}, {"enum", values}, {"default", def}};
}

json list(const std::string& items) { return {{"type", "array"}, {"items", items}, {"default", json::array()}}; }

json object(json fields) { return {{"type", "object"}, {"fields", std::move(fields)}}; }

json shared_sections() {
  json s;
  s["output"] = object({{"dir", {{"type", "string"}, {"default", ""}}},
                        {"name", {{"type", "string"}, {"default", ""}}}});
  json R = num(1.0, 0.0, true);
  R.erase("default");
  R["required"] = true;
  s["domain"] = object({{"R", R}, {"d", integer(1, 1, 2)}});
  s["target"] = object({{"type", choice({"mixture", "empirical", "uniform"}, "uniform")},
                        {"weights", list("number")},
                        {"means", list("point")},
                        {"variances", list("number")},
                        {"points", list("point")}});
  s["sample"] = object({{"N", integer(16, 1)}, {"seed", integer(1, 0)}});
  s["grid"] = object({{"n", integer(0, 0, 8192)}});
  s["sde"] = object({{"dt", num(1e-3, 0.0, true)}, {"particles", integer(1000, 1)}});
  s["train"] = object({{"steps", integer(2000, 1)},
                       {"batch", integer(128, 2)},
                       {"learning_rate", num(0.02, 0.0, true)},
                       {"momentum", num(0.9, 0.0, false, 0.999)},
                       {"final_lr_fraction", num(0.02, 0.0, false, 1.0)},
                       {"clip_norm", num(10.0, 0.0)},
                       {"antithetic", boolean(true)},
                       {"log_uniform_time", boolean(true)},
                       {"eval_samples", integer(20000, 1)},
                       {"fourier_order", integer(6, 1, 16)},
                       {"width", integer(32, 1, 256)},
                       {"time_features", integer(6, 1, 16)}});
  s["score"] = object({{"type", choice({"exact", "zero", "perturbed"}, "exact")},
                       {"delta_p", num(0.0, 0.0)},
                       {"direction", choice({"constant", "mode"}, "constant")},
                       {"mode", integer(1, 1, 64)}});
  return s;
}

struct KindSpec {
  std::vector<std::string> sections;
  json params;
  std::vector<std::string> axes;
  bool needs_density = true;
};

const std::map<std::string, KindSpec>& kind_specs() {
  static const std::map<std::string, KindSpec> specs = {
      {"identities",
       {{"domain", "target", "grid", "score", "sample", "params"},
        {{"s_lo", num(0.01, 0.0, true)},
         {"s_hi", num(1.0, 0.0, true)},
         {"epsilon", num(0.01, 0.0, true)},
         {"T", num(1.0, 0.0, true)},
         {"gl_points", integer(32, 2, 256)},
         {"finite_sample", boolean(true)}},
        {},
        true}},
      {"contraction",
       {{"domain", "target", "grid", "params"},
        {{"times", list("number")}, {"floor", num(1e-10, 0.0, true)}},
        {},
        true}},
      {"wup-sweep",
       {{"domain", "target", "grid", "score", "sweep", "params"},
        {{"T", num(1.0, 0.0, true)}, {"steps", integer(0, 0)}, {"initial", choice({"uniform", "target"}, "uniform")}},
        {"delta_p"},
        true}},
      {"esm-certify",
       {{"domain", "target", "grid", "score", "sde", "sweep", "params"}, {{"T", num(1.0, 0.0, true)}}, {"delta_p"}, true}},
      {"dsm-pointwise",
       {{"domain", "target", "sample", "grid", "sde", "train", "sweep", "params"},
        {{"epsilon", num(0.01, 0.0, true)},
         {"T", num(1.0, 0.0, true)},
         {"generate", boolean(true)},
         {"direct_esm", boolean(true)}},
        {"N", "steps", "epsilon"},
        true}},
      {"early-stopping-sweep",
       {{"domain", "target", "grid", "sweep", "params"}, {{"epsilon", num(0.01, 0.0, true)}}, {"epsilon"}, false}},
      {"memorization",
       {{"domain", "target", "sample", "grid", "sde", "train", "sweep", "params"},
        {{"epsilon", num(1e-4, 0.0, true)}, {"T", num(0.3, 0.0, true)}},
        {"N"},
        false}},
      {"average-dsm",
       {{"domain", "target", "grid", "sde", "train", "sweep", "params"},
        {{"N", integer(16, 1)},
         {"epsilon", num(0.01, 0.0, true)},
         {"T", num(1.0, 0.0, true)},
         {"trials", integer(8, 1)},
         {"c2_cap", num(0.0, 0.0)},
         {"exact_control", boolean(false)},
         {"fitted_constant", num(1.0, 0.0, true)}},
        {"N"},
        true}},
      {"bernstein",
       {{"domain", "grid", "sweep", "params"},
        {{"T", num(1.0, 0.0, true)}, {"min_steps", integer(400, 1)}, {"grad_b", num(5.0, 0.0)}},
        {"grad_b", "n"},
        false}},
  };
  return specs;
}

[[noreturn]] void bad(const std::string& path, const std::string& msg) {
  fail(ErrorKind::configuration, path + ": " + msg);
}

std::string join(const std::string& a, const std::string& b) { return a.empty() ? b : a + "." + b; }

void check_point(const json& v, const std::string& path, int d) {
  if (v.is_number()) {
    if (d != 1) bad(path, "points in d = 2 are [x, y] pairs");
    if (!std::isfinite(v.get<double>())) bad(path, "must be finite");
    return;
  }
  if (!v.is_array() || static_cast<int>(v.size()) != d) bad(path, "expected a point with " + std::to_string(d) + " coordinate(s)");
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!v[i].is_number() || !std::isfinite(v[i].get<double>()))
      bad(path + "[" + std::to_string(i) + "]", "must be a finite number");
}

json check_field(const json& spec, const json& v, const std::string& path, int d);

json check_object(const json& fields, const json& v, const std::string& path, int d) {
  if (!v.is_object()) bad(path, "expected an object");
  for (auto it = v.begin(); it != v.end(); ++it)
    if (!fields.contains(it.key())) bad(join(path, it.key()), "unknown key");
  json out = json::object();
  for (auto it = fields.begin(); it != fields.end(); ++it) {
    const std::string p = join(path, it.key());
    if (v.contains(it.key())) {
      out[it.key()] = check_field(it.value(), v[it.key()], p, d);
    } else if (it.value().value("required", false)) {
      bad(p, "required field is missing");
    } else if (it.value().contains("default")) {
      out[it.key()] = it.value()["default"];
    } else if (it.value()["type"] == "object") {
      out[it.key()] = check_object(it.value()["fields"], json::object(), p, d);
    }
  }
  return out;
}

json check_field(const json& spec, const json& v, const std::string& path, int d) {
  const std::string type = spec["type"];
  if (type == "object") return check_object(spec["fields"], v, path, d);
  if (type == "boolean") {
    if (!v.is_boolean()) bad(path, "expected true or false");
    return v;
  }
  if (type == "string") {
    if (!v.is_string()) bad(path, "expected a string");
    if (spec.contains("enum")) {
      bool ok = false;
      for (const auto& e : spec["enum"]) ok = ok || e == v;
      if (!ok) bad(path, "must be one of " + spec["enum"].dump());
    }
    return v;
  }
  if (type == "array") {
    if (!v.is_array()) bad(path, "expected an array");
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::string p = path + "[" + std::to_string(i) + "]";
      if (spec["items"] == "point") {
        check_point(v[i], p, d);
      } else if (!v[i].is_number() || !std::isfinite(v[i].get<double>())) {
        bad(p, "must be a finite number");
      }
    }
    return v;
  }
  // number or integer
  if (!v.is_number()) bad(path, "expected a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) bad(path, "must be finite");
  if (type == "integer" && !(v.is_number_integer() || v.is_number_unsigned()))
    bad(path, "expected an integer");
  if (spec.contains("min")) {
    const double lo = spec["min"];
    if (spec.value("exclusive_min", false) ? !(x > lo) : !(x >= lo))
      bad(path, std::string("must be ") + (spec.value("exclusive_min", false) ? "> " : ">= ") + json(lo).dump());
  }
  if (spec.contains("max") && x > spec["max"].get<double>()) bad(path, "must be <= " + spec["max"].dump());
  return v;
}

void check_target(const json& t, int d, const KindSpec& spec, const std::string& kind) {
  const std::string type = t["type"];
  auto unused = [&](const char* key) {
    if (!t[key].empty()) bad(std::string("target.") + key, "not used by " + type + " targets");
  };
  if (type == "mixture") {
    unused("points");
    const std::size_t k = t["weights"].size();
    if (k == 0) bad("target.weights", "a mixture needs at least one component");
    if (t["means"].size() != k) bad("target.means", "needs one mean per weight");
    if (t["variances"].size() != k) bad("target.variances", "needs one variance per weight");
    for (std::size_t i = 0; i < k; ++i) {
      if (!(t["weights"][i].get<double>() > 0.0)) bad("target.weights[" + std::to_string(i) + "]", "must be > 0");
      if (!(t["variances"][i].get<double>() > 0.0)) bad("target.variances[" + std::to_string(i) + "]", "must be > 0");
    }
  } else if (type == "empirical") {
    unused("weights");
    unused("means");
    unused("variances");
    if (t["points"].empty()) bad("target.points", "an empirical target needs at least one point");
    if (spec.needs_density) bad("target.type", kind + " needs a target with a density");
  } else {
    unused("weights");
    unused("means");
    unused("variances");
    unused("points");
  }
  (void)d;
}

}  // namespace

const std::vector<std::string>& experiment_kinds() {
  static const std::vector<std::string> kinds = [] {
    std::vector<std::string> k;
    for (const auto& [name, spec] : kind_specs()) k.push_back(name);
    return k;
  }();
  return kinds;
}

json config_schema() {
  json s;
  s["format"] = "tsgm-config/1";
  s["top_level"] = {{"kind", {{"type", "string"}, {"enum", experiment_kinds()}, {"required", true}}},
                    {"seed", integer(1, 0)}};
  s["sections"] = shared_sections();
  json kinds = json::object();
  for (const auto& [name, spec] : kind_specs())
    kinds[name] = {{"sections", spec.sections},
                   {"params", spec.params},
                   {"sweep_axes", spec.axes},
                   {"needs_density", spec.needs_density}};
  s["kinds"] = kinds;
  s["notes"] = {"sweep maps each axis name to a list of values; points are the Cartesian product in "
                "alphabetical axis order",
                "grid.n = 0 lets the experiment choose its grid",
                "points are numbers in d = 1 and [x, y] pairs in d = 2"};
  return s;
}

json validate_config(const json& raw) {
  if (!raw.is_object()) bad("config", "expected a JSON object at top level");
  if (!raw.contains("kind")) bad("kind", "required field is missing");
  if (!raw["kind"].is_string()) bad("kind", "expected a string");
  const std::string kind = raw["kind"];
  const auto it = kind_specs().find(kind);
  if (it == kind_specs().end()) bad("kind", "unknown experiment kind '" + kind + "'");
  const KindSpec& spec = it->second;

  std::set<std::string> allowed = {"kind", "seed", "output"};
  allowed.insert(spec.sections.begin(), spec.sections.end());
  for (auto k = raw.begin(); k != raw.end(); ++k)
    if (!allowed.count(k.key())) bad(k.key(), "unknown key for kind " + kind);
  if (!raw.contains("domain")) bad("domain", "required field is missing");

  json out;
  out["kind"] = kind;
  out["seed"] = raw.contains("seed") ? check_field(integer(1, 0), raw["seed"], "seed", 1) : json(1);
  const json shared = shared_sections();
  out["domain"] = check_object(shared["domain"]["fields"], raw["domain"], "domain", 1);
  const int d = out["domain"]["d"];
  out["output"] = check_object(shared["output"]["fields"], raw.value("output", json::object()), "output", d);
  for (const auto& section : spec.sections) {
    if (section == "domain") continue;
    const json v = raw.value(section, json::object());
    if (section == "params") {
      out["params"] = check_object(spec.params, v, "params", d);
    } else if (section == "sweep") {
      if (!v.is_object()) bad("sweep", "expected an object mapping axis names to value lists");
      json sw = json::object();
      for (auto a = v.begin(); a != v.end(); ++a) {
        if (std::find(spec.axes.begin(), spec.axes.end(), a.key()) == spec.axes.end())
          bad("sweep." + a.key(), "not a sweep axis of " + kind + " (axes: " + json(spec.axes).dump() + ")");
        sw[a.key()] = check_field(list("number"), a.value(), "sweep." + a.key(), d);
      }
      out["sweep"] = sw;
    } else {
      out[section] = check_object(shared[section]["fields"], v, section, d);
    }
  }
  if (out.contains("grid")) {
    const int n = out["grid"]["n"];
    if (n != 0 && n < 8) bad("grid.n", "must be 0 (automatic) or >= 8");
  }
  if (out.contains("target")) check_target(out["target"], d, spec, kind);
  if (out.contains("params") && out["params"].contains("s_lo") &&
      !(out["params"]["s_lo"].get<double>() < out["params"]["s_hi"].get<double>()))
    bad("params.s_hi", "must exceed params.s_lo");
  if (out.contains("params") && out["params"].contains("epsilon") && out["params"].contains("T") &&
      !(out["params"]["epsilon"].get<double>() < out["params"]["T"].get<double>()))
    bad("params.T", "must exceed params.epsilon");
  if (out.contains("score") && out["score"]["type"] != "perturbed" && out["score"]["delta_p"].get<double>() != 0.0)
    bad("score.delta_p", "only perturbed scores take a magnitude");
  if (out.contains("sweep") && out["sweep"].contains("delta_p") && out["score"]["type"] != "perturbed")
    bad("score.type", "a delta_p sweep needs a perturbed score");
  if (out.contains("sweep") && out["sweep"].contains("n"))
    for (const auto& n : out["sweep"]["n"])
      if (n.get<double>() < 8 || n.get<double>() != std::floor(n.get<double>()))
        bad("sweep.n", "grid sizes must be integers >= 8");
  return out;
}

json load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  json raw;
  try {
    raw = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    fail(ErrorKind::configuration, path + ": " + e.what());
  }
  return validate_config(raw);
}

}  // namespace tsgm::cli
