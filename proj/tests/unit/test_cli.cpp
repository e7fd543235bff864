#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include "cli.hpp"
#include "helpers.hpp"
#include "woodflow/data.hpp"

using namespace woodflow;
using woodflow::testing::TempDir;

namespace {

struct CliRun {
  int code;
  std::string out, err;
};

CliRun run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

void write_text(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

const char* kConfig =
    "# small image model\n"
    "levels = 2\n"
    "steps = 1\n"
    "permutation = woodbury\n"
    "coupling_channels = 8\n"
    "batch_size = 16\n";

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    write_text(dir.file("model.cfg"), kConfig);
    ntf_write(dir.file("data.ntf"), synth_gaussian_mixture(64, {1, 8, 8}, 2, 7));
  }
  TempDir dir{"cli"};
};

}  // namespace

TEST_F(CliTest, MissingLevelsIsUsageErrorNamingKey) {
  write_text(dir.file("bad.cfg"), "steps = 1\npermutation = woodbury\n");
  const CliRun r = run({"train", "--config", dir.file("bad.cfg"), "--data", dir.file("data.ntf"), "--iters", "1",
                     "--out", dir.file("ck")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("levels"), std::string::npos);
}

TEST_F(CliTest, UnknownConfigKey) {
  write_text(dir.file("bad.cfg"), std::string(kConfig) + "learning_rate = 1\n");
  const CliRun r = run({"train", "--config", dir.file("bad.cfg"), "--data", dir.file("data.ntf"), "--iters", "1",
                     "--out", dir.file("ck")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("learning_rate"), std::string::npos);
}

TEST_F(CliTest, BadArgumentsAreUsageErrors) {
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({"sample", "--ckpt", "x"}).code, 1);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, CorruptDataIsDataError) {
  write_text(dir.file("junk.ntf"), "not an ntf file");
  const CliRun r = run({"train", "--config", dir.file("model.cfg"), "--data", dir.file("junk.ntf"), "--iters", "1",
                     "--out", dir.file("ck")});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(run({"train", "--config", dir.file("model.cfg"), "--data", dir.file("missing.ntf"), "--iters", "1",
                 "--out", dir.file("ck")})
                .code,
            2);
}

TEST_F(CliTest, TrainZeroThenEvalAndSample) {
  ASSERT_EQ(run({"train", "--config", dir.file("model.cfg"), "--data", dir.file("data.ntf"), "--iters", "0",
                 "--seed", "3", "--out", dir.file("ck")})
                .code,
            0);
  const CliRun ev = run({"eval", "--ckpt", dir.file("ck"), "--data", dir.file("data.ntf")});
  ASSERT_EQ(ev.code, 0) << ev.err;
  std::smatch m;
  ASSERT_TRUE(std::regex_search(ev.out, m, std::regex("mean_bpd (-?[0-9]+\\.[0-9]{4})\n")));
  EXPECT_TRUE(std::isfinite(std::stod(m[1])));

  for (const char* name : {"a.ntf", "b.ntf"}) {
    ASSERT_EQ(run({"sample", "--ckpt", dir.file("ck"), "--num", "4", "--temperature", "0", "--seed", "5", "--out",
                   dir.file(name)})
                  .code,
              0);
  }
  EXPECT_EQ(read_file(dir.file("a.ntf")), read_file(dir.file("b.ntf")));
  const NtfData s = ntf_read(dir.file("a.ntf"));
  EXPECT_EQ(s.shape, (Shape{4, 1, 8, 8}));
}

TEST_F(CliTest, EvalRejectsMismatchedData) {
  ASSERT_EQ(run({"train", "--config", dir.file("model.cfg"), "--data", dir.file("data.ntf"), "--iters", "0",
                 "--out", dir.file("ck")})
                .code,
            0);
  ntf_write(dir.file("other.ntf"), synth_gaussian_mixture(8, {1, 4, 4}, 2, 7));
  EXPECT_EQ(run({"eval", "--ckpt", dir.file("ck"), "--data", dir.file("other.ntf")}).code, 2);
}

TEST_F(CliTest, TrainThenResumeMatchesStraightRun) {
  const std::vector<std::string> base{"train", "--config", dir.file("model.cfg"), "--data", dir.file("data.ntf"),
                                      "--seed", "4"};
  auto with = [&](std::vector<std::string> extra) {
    auto a = base;
    a.insert(a.end(), extra.begin(), extra.end());
    return run(a);
  };
  ASSERT_EQ(with({"--iters", "4", "--out", dir.file("straight")}).code, 0);
  ASSERT_EQ(with({"--iters", "2", "--out", dir.file("split")}).code, 0);
  ASSERT_EQ(run({"train", "--resume", "--data", dir.file("data.ntf"), "--iters", "4", "--out", dir.file("split")}).code,
            0);
  EXPECT_EQ(read_file(dir.file("straight/params.ntfb")), read_file(dir.file("split/params.ntfb")));
  EXPECT_EQ(read_file(dir.file("straight/metrics.log")), read_file(dir.file("split/metrics.log")));
}

TEST_F(CliTest, BenchWritesCsv) {
  const CliRun r = run({"bench", "--layers", "woodbury,conv1x1", "--sizes", "4x4", "--c", "4", "--d", "2", "--reps",
                     "10", "--out", dir.file("b.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto bytes = read_file(dir.file("b.csv"));
  const std::string csv(bytes.begin(), bytes.end());
  EXPECT_EQ(csv.rfind("layer,c,h,w,d,phase,median_s,p10_s,p90_s\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_EQ(run({"bench", "--reps", "5", "--out", dir.file("c.csv")}).code, 1);
}

TEST_F(CliTest, SynthWritesDataset) {
  ASSERT_EQ(run({"synth", "--kind", "2d", "--n", "10", "--out", dir.file("p.ntf")}).code, 0);
  EXPECT_EQ(ntf_read(dir.file("p.ntf")).shape, (Shape{10, 2, 1, 1}));
  EXPECT_EQ(run({"synth", "--kind", "audio", "--out", dir.file("q.ntf")}).code, 1);
}
