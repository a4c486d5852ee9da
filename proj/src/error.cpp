#include "tsgm/error.hpp"

namespace tsgm {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::invalid_input: return "invalid-input";
    case ErrorKind::domain_mismatch: return "domain-mismatch";
    case ErrorKind::no_density: return "no-density";
    case ErrorKind::degenerate_density: return "degenerate-density";
    case ErrorKind::configuration: return "configuration";
    case ErrorKind::solver_diverged: return "solver-diverged";
    case ErrorKind::training_diverged: return "training-diverged";
    case ErrorKind::insufficient_data: return "insufficient-data";
    case ErrorKind::invalid_terminal: return "invalid-terminal";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

}  // namespace tsgm
