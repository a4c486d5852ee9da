#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "tsgm/cli.hpp"

namespace tsgm::cli {

using nlohmann::json;

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::parse_error& e) {
    fail(ErrorKind::io, path + ": " + e.what());
  }
}

}  // namespace

int main_entry(int argc, char** argv) {
  CLI::App app{"Score-based generative modelling on the flat torus: experiments, checks and plot data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version() + " (" + build_id() + ")");

  std::string config_path, out_dir, suite, report_path, series = "all";
  std::uint64_t seed = 0;
  int workers = 1;

  auto* run = app.add_subcommand("run", "run an experiment config and write its JSON report");
  run->add_option("--config", config_path, "experiment config (JSON)")->required();
  run->add_option("--out", out_dir, "output directory (default: output.dir, then $TSGM_OUT, then ./out)");
  auto* seed_opt = run->add_option("--seed", seed, "overrides the config seed");
  run->add_option("--workers", workers, "worker threads over sweep points")->check(CLI::PositiveNumber);

  auto* verify = app.add_subcommand("verify", "run a built-in property suite");
  verify->add_option("--suite", suite, "identities, kernels, metrics, pde, certificates or all")->required();
  verify->add_option("--out", out_dir, "also write the JSON summary to this directory");

  auto* plot = app.add_subcommand("emit-plotdata", "write CSV files for series of a report");
  plot->add_option("--report", report_path, "report JSON written by run")->required();
  plot->add_option("--series", series, "comma separated series names, or all");
  plot->add_option("--out", out_dir, "output directory (default: next to the report)");

  auto* schema = app.add_subcommand("print-config-schema", "print the config schema as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? exit_ok : exit_config;
  }

  try {
    if (*schema) {
      std::cout << config_schema().dump(2) << "\n";
      return exit_ok;
    }
    if (*run) {
      const json cfg = load_config(config_path);
      RunOptions opt;
      if (*seed_opt) opt.seed = seed;
      opt.workers = workers;
      const json report = run_experiment(cfg, opt);
      const std::string path = write_report(report, output_root(out_dir, cfg));
      const int status = report_status(report);
      if (status != exit_ok) {
        std::cerr << "run failed: " << report["failure"]["message"].get<std::string>() << "\n";
        std::cerr << "partial report: " << path << "\n";
      } else {
        std::cout << path << "\n";
      }
      return status;
    }
    if (*verify) {
      std::vector<std::string> names = suite == "all" ? verify_suites() : std::vector<std::string>{suite};
      json summary = json::array();
      bool ok = true;
      for (const auto& n : names) {
        const auto r = verify_suite(n);
        ok = ok && r.passed();
        summary.push_back(r);
        for (const auto& c : r.checks)
          if (!c.passed) std::cerr << "FAIL " << n << "/" << c.name << ": " << c.value << " > " << c.tolerance << "\n";
      }
      const json out = names.size() == 1 ? summary[0] : json{{"passed", ok}, {"suites", summary}};
      std::cout << out.dump(2) << "\n";
      if (!out_dir.empty()) {
        json wrapped{{"config", {{"output", {{"name", "verify-" + suite}}}}}, {"kind", "verify"}, {"summary", out}};
        write_report(wrapped, out_dir);
      }
      return ok ? exit_ok : exit_check_failed;
    }
    if (*plot) {
      const json report = read_json(report_path);
      std::string dir = out_dir;
      if (dir.empty()) dir = std::filesystem::path(report_path).parent_path().string();
      if (dir.empty()) dir = ".";
      for (const auto& p : emit_plotdata(report, series, dir)) std::cout << p << "\n";
      return exit_ok;
    }
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_other;
  }
  return exit_other;
}

}  // namespace tsgm::cli
