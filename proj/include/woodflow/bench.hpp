#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace woodflow {

enum class BenchLayer { woodbury, me_woodbury, conv1x1, dense };
// forward: forward pass plus log-determinant; backward: parameter gradient of
// sum(y) + logdet from a recorded forward; inverse: the sampling direction.
enum class BenchPhase { forward, backward, inverse };

std::string to_string(BenchLayer layer);
std::string to_string(BenchPhase phase);
BenchLayer parse_bench_layer(const std::string& text);

struct BenchCase {
  BenchLayer layer = BenchLayer::woodbury;
  std::size_t c = 16, h = 16, w = 16, d = 16;
  std::size_t reps = 10;
  std::size_t warmup = 3;
  std::size_t threads = 1;
  // Phases to time; the others are reported as skipped.
  std::vector<BenchPhase> phases{BenchPhase::forward, BenchPhase::backward, BenchPhase::inverse};
  // Dense cases whose working set would exceed this are skipped.
  std::size_t memory_limit_bytes = std::size_t{2} << 30;
};

struct PhaseTiming {
  BenchPhase phase = BenchPhase::forward;
  bool skipped = true;
  double median_s = 0, p10_s = 0, p90_s = 0;
};

struct BenchRecord {
  BenchCase bench_case;
  std::vector<PhaseTiming> timings;  // forward, backward, inverse
  std::string note;                  // reason when a case was skipped
};

// Batch size 1, steady clock, warmups excluded. Throws ContractError for
// reps < 10 or warmup < 3.
std::vector<BenchRecord> run_bench(const std::vector<BenchCase>& cases, std::uint64_t seed = 0);
BenchRecord run_case(const BenchCase& bench_case, std::uint64_t seed = 0);

// Header `layer,c,h,w,d,phase,median_s,p10_s,p90_s`, one row per case and
// phase in input order; skipped phases print nan.
void emit_csv(const std::vector<BenchRecord>& records, std::ostream& out);
void emit_csv(const std::vector<BenchRecord>& records, const std::string& path);

// Linear-interpolated percentile, q in [0, 1].
double percentile(std::vector<double> values, double q);
// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace woodflow
