#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace woodflow {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;  // worst observed error
};

// Reduced versions of the identity, round-trip, log-determinant and gradient
// property suites. Deterministic in `seed`.
std::vector<CheckResult> run_selfcheck(std::uint64_t seed = 1);

}  // namespace woodflow
