#pragma once

#include <cstddef>
#include <string>

#include "woodflow/model.hpp"

namespace woodflow {

// Model configuration plus the training knobs that live in the same file.
struct RunConfig {
  FlowConfig flow;
  std::size_t batch_size = 64;
  std::size_t checkpoint_every = 0;  // 0: only at the end
};

// Parses key=value lines. Blank lines and lines starting with '#' are
// ignored. levels, steps and permutation are required; schedules are comma
// lists. Unknown or repeated keys and malformed values raise ConfigError
// naming the key.
RunConfig parse_run_config(const std::string& text);
RunConfig read_run_config(const std::string& path);

// Inverse of parse_run_config; every key is written explicitly.
std::string format_run_config(const RunConfig& cfg);

}  // namespace woodflow
