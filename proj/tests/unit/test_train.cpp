#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "woodflow/errors.hpp"
#include "woodflow/train.hpp"

using namespace woodflow;
using woodflow::testing::TempDir;

namespace {

RunConfig image_config(PermutationKind kind = PermutationKind::woodbury) {
  RunConfig cfg;
  cfg.flow.levels = 2;
  cfg.flow.steps = 1;
  cfg.flow.coupling_channels = 8;
  cfg.flow.permutation = kind;
  cfg.batch_size = 16;
  return cfg;
}

const ImageSource& image_data() {
  static const ImageSource src(synth_gaussian_mixture(256, {1, 8, 8}, 2, 7), 8);
  return src;
}

RunConfig planar_config() {
  RunConfig cfg;
  cfg.flow.levels = 1;
  cfg.flow.steps = 4;
  cfg.flow.coupling_channels = 16;
  cfg.flow.permutation = PermutationKind::woodbury;
  cfg.flow.squeeze = false;
  cfg.flow.d_c = {2};
  cfg.flow.d_s = {1};
  cfg.batch_size = 64;
  return cfg;
}

void expect_same_state(Trainer& a, Trainer& b) {
  const auto pa = a.model().parameters(), pb = b.model().parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
  EXPECT_EQ(a.adam().t, b.adam().t);
  for (const auto& [name, m] : a.adam().m) EXPECT_EQ(m, b.adam().m.at(name)) << name;
  for (const auto& [name, v] : a.adam().v) EXPECT_EQ(v, b.adam().v.at(name)) << name;
}

}  // namespace

TEST(Adam, FirstStepClosedForm) {
  Parameter theta{"theta", Tensor::vector({0})};
  std::vector<Parameter*> params{&theta};
  AdamState st;
  adam_step(params, {{"theta", Tensor::vector({1})}}, st);
  EXPECT_EQ(st.t, 1u);
  EXPECT_NEAR(theta.value[0], -0.001, 1e-11);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Parameter theta{"theta", Tensor::vector({0.5, -2})};
  std::vector<Parameter*> params{&theta};
  AdamState st;
  for (int i = 0; i < 3; ++i) adam_step(params, {{"theta", Tensor::vector({0, 0})}}, st);
  EXPECT_EQ(theta.value, Tensor::vector({0.5, -2}));
}

TEST(Adam, IdenticalInputsIdenticalUpdates) {
  Parameter a{"p", Tensor::vector({1, 2, 3})}, b{"p", Tensor::vector({1, 2, 3})};
  std::vector<Parameter*> pa{&a}, pb{&b};
  AdamState sa, sb;
  const GradMap g{{"p", Tensor::vector({0.3, -0.1, 7})}};
  for (int i = 0; i < 5; ++i) {
    adam_step(pa, g, sa);
    adam_step(pb, g, sb);
  }
  EXPECT_EQ(a.value, b.value);
}

TEST(Adam, ReducesQuadraticLoss) {
  Parameter theta{"theta", Tensor::vector({2, -3})};
  std::vector<Parameter*> params{&theta};
  AdamState st;
  const auto loss = [&] { return theta.value[0] * theta.value[0] + theta.value[1] * theta.value[1]; };
  real prev = loss();
  for (int i = 0; i < 20; ++i) {
    adam_step(params, {{"theta", scaled(theta.value, 2)}}, st);
    const real now = loss();
    EXPECT_LT(now, prev);
    prev = now;
  }
}

TEST(Adam, NonFiniteGradientAbortsBeforeUpdate) {
  Parameter a{"a", Tensor::vector({1})}, b{"b", Tensor::vector({1})};
  std::vector<Parameter*> params{&a, &b};
  AdamState st;
  try {
    adam_step(params, {{"a", Tensor::vector({1})}, {"b", Tensor::vector({std::nan("")})}}, st);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
  }
  EXPECT_EQ(a.value[0], 1);
  EXPECT_EQ(st.t, 0u);
}

TEST(Adam, ShapeMismatchRejected) {
  Parameter a{"a", Tensor::vector({1, 2})};
  std::vector<Parameter*> params{&a};
  AdamState st;
  EXPECT_THROW(adam_step(params, {{"a", Tensor::vector({1})}}, st), DimensionError);
}

TEST(Trainer, ActnormPostconditionOnInitBatch) {
  const RunConfig cfg = image_config();
  Trainer tr(cfg, 3, image_data());
  ASSERT_TRUE(tr.model().initialized());
  Rng rng = Rng(3).stream(0);
  const Tensor batch = image_data().draw(cfg.batch_size, rng);
  const auto layers = tr.model().layers();
  ASSERT_EQ(layers[1]->kind(), "actnorm");
  const Tensor y = layers[1]->evaluate(layers[0]->evaluate(batch).y).y;
  const std::size_t c = y.dim(1), hw = y.dim(2) * y.dim(3), b = y.dim(0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    real mean = 0, sq = 0;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t k = 0; k < hw; ++k) mean += y[(i * c + ch) * hw + k];
    mean /= static_cast<real>(b * hw);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t k = 0; k < hw; ++k) sq += std::pow(y[(i * c + ch) * hw + k] - mean, 2);
    EXPECT_LT(std::abs(mean), 1e-6);
    EXPECT_LT(std::abs(std::sqrt(sq / static_cast<real>(b * hw)) - 1), 1e-6);
  }
}

TEST(Trainer, ZeroIterationsWritesInitCheckpoint) {
  TempDir dir("train0");
  Trainer tr(image_config(), 4, image_data());
  EXPECT_TRUE(tr.run_until(0, dir.path().string()).empty());
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "manifest.txt"));
  EXPECT_EQ(std::filesystem::file_size(dir.path() / "metrics.log"), 0u);
  const Checkpoint ck = load_checkpoint(dir.path().string());
  EXPECT_EQ(ck.iteration, 0u);
  EXPECT_TRUE(ck.model->initialized());
}

TEST(Trainer, MetricsLogLines) {
  TempDir dir("trainlog");
  Trainer tr(image_config(), 5, image_data());
  const auto metrics = tr.run_until(3, dir.path().string());
  ASSERT_EQ(metrics.size(), 3u);
  std::ifstream in(dir.path() / "metrics.log");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(line, format_metrics(metrics[n]));
    ++n;
  }
  EXPECT_EQ(n, 3u);
  for (const auto& m : metrics) {
    EXPECT_NEAR(m.bpd, m.nll / (64 * std::log(2.0)) + 8, 1e-9);
    EXPECT_GT(m.grad_norm, 0);
  }
}

TEST(Trainer, ResumeIsBitwiseEquivalent) {
  for (auto kind : {PermutationKind::woodbury, PermutationKind::me_woodbury, PermutationKind::conv1x1}) {
    TempDir dir("resume");
    Trainer straight(image_config(kind), 6, image_data());
    straight.run_until(8);

    Trainer first(image_config(kind), 6, image_data());
    first.run_until(3, dir.path().string());
    auto resumed = Trainer::resume(dir.path().string(), image_data());
    EXPECT_EQ(resumed->iteration(), 3u);
    resumed->run_until(8);
    expect_same_state(straight, *resumed);
  }
}

TEST(Trainer, PeriodicCheckpoints) {
  TempDir dir("periodic");
  RunConfig cfg = image_config();
  cfg.checkpoint_every = 2;
  Trainer tr(cfg, 8, image_data());
  std::vector<std::size_t> seen;
  tr.run_until(3, dir.path().string());
  EXPECT_EQ(load_checkpoint(dir.path().string()).iteration, 3u);
}

TEST(Trainer, MultiThreadedLossMatchesSingle) {
  Trainer tr(image_config(), 9, image_data());
  Rng rng(1);
  const Tensor x = image_data().draw(16, rng);
  const LossAndGrad one = loss_and_grad(tr.model(), x, 1), four = loss_and_grad(tr.model(), x, 4);
  EXPECT_NEAR(one.nll, four.nll, 1e-10);
  for (const auto& [name, g] : one.grads) EXPECT_LT(max_abs_diff(g, four.grads.at(name)), 1e-10) << name;
}

TEST(Evaluate, NoiseSeedInvariance) {
  Trainer tr(image_config(), 10, image_data());
  tr.run_until(20);
  real lo = 1e9, hi = -1e9;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const EvalResult r = evaluate(tr.model(), image_data(), seed);
    EXPECT_EQ(r.samples, 256u);
    lo = std::min(lo, r.bpd);
    hi = std::max(hi, r.bpd);
  }
  EXPECT_LT(hi - lo, 0.01);
}

// Two-mode planar data, 500 steps: the loss averaged over consecutive
// 50-step windows goes down in at least 90% of window transitions.
TEST(Trainer, PlanarMovingAverageDecreases) {
  const ContinuousSource data(synth_gaussian_2d(4096, 7));
  Trainer tr(planar_config(), 7, data);
  const auto metrics = tr.run_until(500);
  ASSERT_EQ(metrics.size(), 500u);
  std::vector<real> windows;
  for (std::size_t w = 0; w < 10; ++w) {
    real s = 0;
    for (std::size_t i = 0; i < 50; ++i) s += metrics[w * 50 + i].bpd;
    windows.push_back(s / 50);
  }
  std::size_t down = 0;
  for (std::size_t w = 1; w < windows.size(); ++w) down += windows[w] <= windows[w - 1];
  EXPECT_GE(static_cast<double>(down), 0.9 * static_cast<double>(windows.size() - 1));
  EXPECT_LT(windows.back(), windows.front());
}
