#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "helpers.hpp"
#include "woodflow/errors.hpp"
#include "woodflow/model.hpp"
#include "woodflow/oracle.hpp"

using namespace woodflow;
using woodflow::testing::random_tensor;

namespace {

FlowConfig small_config(PermutationKind kind, std::size_t levels, std::size_t steps) {
  FlowConfig cfg;
  cfg.levels = levels;
  cfg.steps = steps;
  cfg.coupling_channels = 8;
  cfg.permutation = kind;
  cfg.channels = 3;
  cfg.height = 4;
  cfg.width = 4;
  return cfg;
}

// Initialized on a random batch, then nudged so no layer is the identity.
FlowModel trained_looking(const FlowConfig& cfg, std::uint64_t seed) {
  FlowModel m(cfg, seed);
  Rng rng(seed + 100);
  m.data_init(random_tensor({16, cfg.channels, cfg.height, cfg.width}, rng, real(0.3)));
  perturb_parameters(m.parameters(), rng, real(0.05));
  return m;
}

const PermutationKind kKinds[] = {PermutationKind::conv1x1, PermutationKind::woodbury, PermutationKind::me_woodbury};

}  // namespace

TEST(Config, Validation) {
  FlowConfig cfg = small_config(PermutationKind::woodbury, 3, 1);
  EXPECT_THROW(cfg.validate(), ConfigError);  // 4 is not divisible by 8
  cfg.levels = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.levels = 2;
  cfg.d_c = {2};
  EXPECT_THROW(cfg.validate(), ConfigError);  // wrong list length
  cfg.d_c.clear();
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_THROW(parse_permutation("emerging"), ConfigError);
  EXPECT_EQ(parse_permutation("me_woodbury"), PermutationKind::me_woodbury);
}

TEST(Config, DefaultSchedules) {
  EXPECT_EQ(default_channel_schedule(3), (std::vector<std::size_t>{8, 8, 16}));
  EXPECT_EQ(default_spatial_schedule(3), (std::vector<std::size_t>{16, 16, 8}));
  EXPECT_EQ(default_channel_schedule(6), (std::vector<std::size_t>{8, 8, 16, 16, 16, 16}));
  EXPECT_EQ(default_spatial_schedule(5), (std::vector<std::size_t>{16, 16, 16, 8, 8}));
  EXPECT_EQ(default_channel_schedule(2), (std::vector<std::size_t>{8, 8}));
  EXPECT_THROW(default_channel_schedule(7), ConfigError);
}

TEST(Structure, SingleStep) {
  FlowConfig cfg = small_config(PermutationKind::conv1x1, 1, 1);
  cfg.channels = 1;
  cfg.height = cfg.width = 2;
  FlowModel m(cfg, 1);
  EXPECT_EQ(m.layer_count(), 4u);
  const auto layers = m.layers();
  ASSERT_EQ(layers.size(), 4u);
  EXPECT_EQ(layers[0]->kind(), "squeeze");
  EXPECT_EQ(layers[1]->kind(), "actnorm");
  EXPECT_EQ(layers[2]->kind(), "conv1x1");
  EXPECT_EQ(layers[3]->kind(), "coupling");
  EXPECT_EQ(m.levels()[0].split, nullptr);
  EXPECT_FALSE(m.initialized());
}

TEST(Structure, ThreeLevelsChannelArithmetic) {
  FlowConfig cfg = small_config(PermutationKind::woodbury, 3, 8);
  cfg.height = cfg.width = 16;
  FlowModel m(cfg, 2);
  std::size_t splits = 0;
  for (std::size_t l = 0; l < 3; ++l) {
    const auto& level = m.levels()[l];
    splits += level.split != nullptr;
    // c * 4^l / 2^(l-1) with l counted from 1
    const std::size_t expected = 3 * (std::size_t{1} << (2 * (l + 1))) / (std::size_t{1} << l);
    EXPECT_EQ(level.output_shape[0], expected) << "level " << l;
    EXPECT_EQ(level.layers.size(), 1u + 3 * 8);
  }
  EXPECT_EQ(splits, 2u);
}

TEST(Structure, SameSeedSameParameters) {
  const FlowConfig cfg = small_config(PermutationKind::me_woodbury, 2, 2);
  FlowModel a(cfg, 5), b(cfg, 5), c(cfg, 6);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
    any_diff = any_diff || !(pa[i]->value == pc[i]->value);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Likelihood, ZeroInputClosedForm) {
  for (auto kind : kKinds) {
    FlowConfig cfg = small_config(kind, 2, 2);
    FlowModel m(cfg, 3);
    m.mark_initialized();
    const Tensor x({2, 3, 4, 4});
    const LayerTrace tr = m.trace(x);
    real priors = tr.base_logp[0];
    for (const auto& s : tr.split_logp) priors += s[0];
    real logdet = 0;
    for (const auto& l : tr.logdets) logdet += l[0];
    const real d = 48;
    EXPECT_NEAR(-priors / (d * std::numbers::ln2) + 8, 9.325748064736159, 1e-12);
    const Likelihood lik = m.log_likelihood(x);
    EXPECT_NEAR(lik.bpd[0], 9.325748064736159 - logdet / (d * std::numbers::ln2), 1e-12);
    EXPECT_NEAR(lik.nll[0], -(priors + logdet), 1e-12);
  }
}

TEST(Likelihood, BatchOrderAndPartitionInvariance) {
  FlowModel m = trained_looking(small_config(PermutationKind::woodbury, 2, 2), 4);
  Rng rng(60);
  const Tensor x = random_tensor({6, 3, 4, 4}, rng, real(0.3));
  const Tensor lp = m.log_prob(x);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  Tensor shuffled(x.shape());
  for (std::size_t i = 0; i < 6; ++i) {
    const Tensor row = slice_axis(x, 0, perm[i], 1);
    std::copy(row.data().begin(), row.data().end(), shuffled.data().begin() + static_cast<long>(i * 48));
  }
  const Tensor lps = m.log_prob(shuffled);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(lps[i], lp[perm[i]], 1e-12);
  const Tensor head = m.log_prob(slice_axis(x, 0, 0, 2)), tail = m.log_prob(slice_axis(x, 0, 2, 4));
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(head[i], lp[i], 1e-12);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(tail[i], lp[2 + i], 1e-12);
}

TEST(Likelihood, TotalIsSumOfLayers) {
  FlowModel m = trained_looking(small_config(PermutationKind::me_woodbury, 2, 2), 5);
  Rng rng(61);
  const Tensor x = random_tensor({3, 3, 4, 4}, rng, real(0.3));
  const LayerTrace tr = m.trace(x);
  EXPECT_EQ(tr.names.size(), m.layers().size());
  const Tensor lp = m.log_prob(x);
  for (std::size_t b = 0; b < 3; ++b) {
    real total = tr.base_logp[b];
    for (const auto& s : tr.split_logp) total += s[b];
    for (const auto& l : tr.logdets) total += l[b];
    EXPECT_NEAR(total, lp[b], 1e-11);
  }
}

TEST(Likelihood, NonFiniteInputNamesLayer) {
  FlowModel m = trained_looking(small_config(PermutationKind::woodbury, 1, 1), 6);
  Tensor x({1, 3, 4, 4});
  x[5] = std::numeric_limits<real>::quiet_NaN();
  EXPECT_THROW(m.log_prob(x), NumericalError);
}

TEST(Bijection, RoundTripAllKinds) {
  Rng rng(62);
  for (auto kind : kKinds)
    for (std::size_t levels = 1; levels <= 3; ++levels) {
      FlowConfig cfg = small_config(kind, levels, 4);
      cfg.height = cfg.width = 8;
      FlowModel m = trained_looking(cfg, 7 + levels);
      const Tensor x = random_tensor({2, 3, 8, 8}, rng, real(0.3));
      EXPECT_LT(max_abs_diff(m.decode(m.encode(x)), x), 1e-7) << to_string(kind) << " L=" << levels;
    }
}

TEST(Bijection, LogdetMatchesFiniteDifferenceJacobian) {
  for (auto kind : kKinds) {
    FlowModel m = trained_looking(small_config(kind, 2, 2), 9);
    Rng rng(63);
    const Tensor x = random_tensor({1, 3, 4, 4}, rng, real(0.3));
    const Tensor jac = fd_jacobian([&](const Tensor& b) { return m.encode(b); }, x, real(1e-5));
    ASSERT_EQ(jac.rows(), 48u);
    const LayerTrace tr = m.trace(x);
    real logdet = 0;
    for (const auto& l : tr.logdets) logdet += l[0];
    EXPECT_NEAR(brute_logdet(jac).logabs, logdet, 1e-3) << to_string(kind);
  }
}

TEST(Sampling, RequiresInitialization) {
  FlowModel m(small_config(PermutationKind::woodbury, 1, 1), 10);
  EXPECT_THROW(m.sample(2, real(0.7), Rng(1)), ContractError);
}

TEST(Sampling, ZeroTemperatureIsInverseOfZero) {
  FlowModel m(small_config(PermutationKind::woodbury, 2, 2), 11);
  m.mark_initialized();
  const Tensor a = m.sample(3, 0, Rng(1)), b = m.sample(3, 0, Rng(2));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, m.decode(Tensor({3, 48})));
}

TEST(Sampling, SeededAndFinite) {
  FlowModel m = trained_looking(small_config(PermutationKind::me_woodbury, 2, 2), 12);
  const Tensor a = m.sample(100, real(0.7), Rng(3)), b = m.sample(100, real(0.7), Rng(3));
  EXPECT_EQ(a, b);
  const Tensor lp = m.log_prob(a);
  EXPECT_TRUE(all_finite(lp));
  // Sample b depends only on its own stream.
  EXPECT_EQ(slice_axis(m.sample(5, real(0.7), Rng(3)), 0, 0, 5), slice_axis(a, 0, 0, 5));
}

TEST(Normalization, IdentityInitTwoDimensional) {
  FlowConfig cfg;
  cfg.levels = 1;
  cfg.steps = 2;
  cfg.coupling_channels = 8;
  cfg.channels = 2;
  cfg.height = cfg.width = 1;
  cfg.squeeze = false;
  cfg.d_c = {2};
  cfg.d_s = {1};
  FlowModel m(cfg, 13);
  m.mark_initialized();
  const auto report = density_normalization_check(m, 401);
  EXPECT_NEAR(report.mass, 1, 1e-3);
  EXPECT_TRUE(report.stable);
  EXPECT_LT(std::abs(report.mass - report.refined_mass), 1e-4);
}

TEST(Normalization, RejectsHigherDimensionalModels) {
  FlowModel m(small_config(PermutationKind::woodbury, 1, 1), 14);
  m.mark_initialized();
  EXPECT_THROW(density_normalization_check(m, 11), ContractError);
}
