#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsgm/error.hpp"

namespace tsgm::cli {

enum ExitCode : int {
  exit_ok = 0,
  exit_other = 1,
  exit_config = 2,
  exit_solver_diverged = 3,
  exit_training_diverged = 4,
  exit_check_failed = 5,
  exit_io = 6,
};

int exit_code(ErrorKind kind) noexcept;

std::string version();
std::string build_id();

// ---- configuration ------------------------------------------------------------

const std::vector<std::string>& experiment_kinds();

/// Full schema: shared sections plus, per kind, allowed sections, parameters
/// and sweep axes.
nlohmann::json config_schema();

/// Strict validation. Unknown keys, wrong types and out-of-range values throw
/// Error(configuration) whose message starts with the dotted field path.
/// Returns the config with every default filled in.
nlohmann::json validate_config(const nlohmann::json& raw);

/// Reads and validates a JSON config file. io on unreadable files,
/// configuration on parse errors.
nlohmann::json load_config(const std::string& path);

// ---- runs -----------------------------------------------------------------------

struct RunOptions {
  std::optional<std::uint64_t> seed;  ///< overrides the config seed
  int workers = 1;
  bool stamp_time = true;             ///< false leaves environment.timestamp empty
};

/// Runs a validated config. Never throws for failures inside the experiment:
/// the report then has status "failed", a failure record and whatever points
/// finished. Throws only for invalid configs.
nlohmann::json run_experiment(const nlohmann::json& config, const RunOptions& opt = {});

/// Process exit status implied by a report.
int report_status(const nlohmann::json& report);

/// The report without its timestamp, for reproducibility comparisons.
nlohmann::json report_payload(const nlohmann::json& report);

/// Output root: explicit value, then config output.dir, then $TSGM_OUT, then "out".
std::string output_root(const std::string& explicit_dir, const nlohmann::json& config);

/// Writes <dir>/<name>.json and returns the path.
std::string write_report(const nlohmann::json& report, const std::string& dir);

// ---- plot data ----------------------------------------------------------------

std::vector<std::string> available_series(const nlohmann::json& report);

/// Writes one CSV per selected series ("all" selects every series) and returns
/// the paths. Unknown selectors throw invalid_input listing what is available.
std::vector<std::string> emit_plotdata(const nlohmann::json& report, const std::string& selector,
                                       const std::string& dir);

// ---- verification suites ------------------------------------------------------

const std::vector<std::string>& verify_suites();

struct CheckResult {
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

struct SuiteResult {
  std::string suite;
  std::vector<CheckResult> checks;
  bool passed() const;
};

void to_json(nlohmann::json& j, const CheckResult& c);
void to_json(nlohmann::json& j, const SuiteResult& s);

SuiteResult verify_suite(const std::string& name);

// ---- entry point ----------------------------------------------------------------

int main_entry(int argc, char** argv);

}  // namespace tsgm::cli
