#include "woodflow/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "woodflow/errors.hpp"

namespace woodflow {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_count(const std::string& key, const std::string& text) {
  std::size_t v = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_count(key, trim(item)));
  if (out.empty()) throw ConfigError("key '" + key + "': empty list");
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("key '" + key + "' given twice");
    FlowConfig& f = cfg.flow;
    if (key == "levels") f.levels = parse_count(key, value);
    else if (key == "steps") f.steps = parse_count(key, value);
    else if (key == "coupling_channels") f.coupling_channels = parse_count(key, value);
    else if (key == "permutation") f.permutation = parse_permutation(value);
    else if (key == "bits") f.bits = static_cast<unsigned>(parse_count(key, value));
    else if (key == "d_c") f.d_c = parse_list(key, value);
    else if (key == "d_s") f.d_s = parse_list(key, value);
    else if (key == "d_h") f.d_h = parse_list(key, value);
    else if (key == "d_w") f.d_w = parse_list(key, value);
    else if (key == "channels") f.channels = parse_count(key, value);
    else if (key == "height") f.height = parse_count(key, value);
    else if (key == "width") f.width = parse_count(key, value);
    else if (key == "squeeze") f.squeeze = parse_count(key, value) != 0;
    else if (key == "batch_size") cfg.batch_size = parse_count(key, value);
    else if (key == "checkpoint_every") cfg.checkpoint_every = parse_count(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  for (const char* required : {"levels", "steps", "permutation"}) {
    if (!seen.count(required)) throw ConfigError("missing required config key '" + std::string(required) + "'");
  }
  if (cfg.batch_size == 0) throw ConfigError("key 'batch_size' must be positive");
  return cfg;
}

RunConfig read_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string format_run_config(const RunConfig& cfg) {
  const FlowConfig& f = cfg.flow;
  std::ostringstream out;
  out << "levels=" << f.levels << "\n"
      << "steps=" << f.steps << "\n"
      << "coupling_channels=" << f.coupling_channels << "\n"
      << "permutation=" << to_string(f.permutation) << "\n"
      << "bits=" << f.bits << "\n";
  if (!f.d_c.empty()) out << "d_c=" << join(f.d_c) << "\n";
  if (!f.d_s.empty()) out << "d_s=" << join(f.d_s) << "\n";
  if (!f.d_h.empty()) out << "d_h=" << join(f.d_h) << "\n";
  if (!f.d_w.empty()) out << "d_w=" << join(f.d_w) << "\n";
  out << "channels=" << f.channels << "\n"
      << "height=" << f.height << "\n"
      << "width=" << f.width << "\n"
      << "squeeze=" << (f.squeeze ? 1 : 0) << "\n"
      << "batch_size=" << cfg.batch_size << "\n"
      << "checkpoint_every=" << cfg.checkpoint_every << "\n";
  return out.str();
}

}  // namespace woodflow
