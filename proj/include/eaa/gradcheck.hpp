#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace eaa {

// Outcome of one finite-difference comparison: the worst relative error over
// every coordinate of every leaf the check sweeps, and the tolerance it was
// judged against.
struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

// Central finite-difference sweep over every layer primitive, every loss, and
// all parameters of a small end-to-end network. Deterministic for a given
// seed. Layer and loss checks are judged at 1e-4, the end-to-end sweep at
// 1e-3 (longer chains accumulate more roundoff).
std::vector<CheckResult> run_gradient_checks(std::uint64_t seed);

bool all_passed(const std::vector<CheckResult>& results);

// One line per result plus a summary line, aligned for terminal output.
std::string format_report(const std::vector<CheckResult>& results);

}  // namespace eaa
