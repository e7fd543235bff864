#include <gtest/gtest.h>

#include <sstream>

#include "helpers.hpp"
#include "woodflow/bench.hpp"
#include "woodflow/errors.hpp"

using namespace woodflow;
using woodflow::testing::TempDir;

namespace {

BenchCase tiny(BenchLayer layer) {
  BenchCase bc;
  bc.layer = layer;
  bc.c = 4;
  bc.h = bc.w = 4;
  bc.d = 2;
  return bc;
}

}  // namespace

TEST(Bench, EmptyRecordsHeaderOnly) {
  std::ostringstream out;
  emit_csv({}, out);
  EXPECT_EQ(out.str(), "layer,c,h,w,d,phase,median_s,p10_s,p90_s\n");
}

TEST(Bench, ThreeRowsPerCaseAndOrderedPercentiles) {
  std::vector<BenchCase> cases;
  for (auto l : {BenchLayer::woodbury, BenchLayer::me_woodbury, BenchLayer::conv1x1, BenchLayer::dense})
    cases.push_back(tiny(l));
  const auto records = run_bench(cases, 1);
  ASSERT_EQ(records.size(), 4u);
  for (const auto& r : records) {
    ASSERT_EQ(r.timings.size(), 3u);
    for (const auto& t : r.timings) {
      EXPECT_FALSE(t.skipped) << to_string(r.bench_case.layer);
      EXPECT_LE(t.p10_s, t.median_s);
      EXPECT_LE(t.median_s, t.p90_s);
      EXPECT_GT(t.median_s, 0);
    }
  }
  std::ostringstream a, b;
  emit_csv(records, a);
  emit_csv(records, b);
  EXPECT_EQ(a.str(), b.str());
  std::size_t lines = 0;
  for (char ch : a.str()) lines += ch == '\n';
  EXPECT_EQ(lines, 1u + 3u * 4u);
  EXPECT_NE(a.str().find("woodbury,4,4,4,2,forward,"), std::string::npos);
}

TEST(Bench, RepeatRunIsStable) {
  BenchCase bc = tiny(BenchLayer::woodbury);
  bc.c = 8;
  bc.h = bc.w = 16;
  bc.d = 4;
  bc.reps = 30;
  const auto a = run_case(bc, 2), b = run_case(bc, 2);
  for (std::size_t p = 0; p < 3; ++p) {
    const double ratio = a.timings[p].median_s / b.timings[p].median_s;
    EXPECT_LT(ratio, 3.0);
    EXPECT_GT(ratio, 1.0 / 3.0);
  }
}

TEST(Bench, PhaseSelectionAndMemoryGuard) {
  BenchCase bc = tiny(BenchLayer::dense);
  bc.phases = {BenchPhase::inverse};
  auto r = run_case(bc);
  EXPECT_TRUE(r.timings[0].skipped);
  EXPECT_TRUE(r.timings[1].skipped);
  EXPECT_FALSE(r.timings[2].skipped);

  bc.phases = {BenchPhase::forward};
  bc.memory_limit_bytes = 16;
  r = run_case(bc);
  EXPECT_TRUE(r.timings[0].skipped);
  EXPECT_FALSE(r.note.empty());
  std::ostringstream out;
  emit_csv({r}, out);
  EXPECT_NE(out.str().find("dense,4,4,4,2,forward,nan,nan,nan"), std::string::npos);
}

TEST(Bench, ContractViolations) {
  BenchCase bc = tiny(BenchLayer::woodbury);
  bc.reps = 9;
  EXPECT_THROW(run_case(bc), ContractError);
  bc.reps = 10;
  bc.warmup = 2;
  EXPECT_THROW(run_case(bc), ContractError);
  EXPECT_THROW(parse_bench_layer("emerging"), ConfigError);
}

TEST(Bench, UnwritablePath) {
  EXPECT_THROW(emit_csv({}, std::string("/nonexistent-dir/x/bench.csv")), IoError);
}

TEST(Bench, Statistics) {
  EXPECT_DOUBLE_EQ(percentile({3, 1, 2}, 0.5), 2);
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4, 5}, 0.1), 1.4);
  EXPECT_NEAR(loglog_slope({1, 2, 4}, {3, 12, 48}), 2.0, 1e-12);
}
