#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace woodflow::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

// Runs one command line (args excludes the program name) and returns the
// process exit code. Never throws.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace woodflow::cli
