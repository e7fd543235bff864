#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "woodflow/errors.hpp"
#include "woodflow/oracle.hpp"

using namespace woodflow;
using woodflow::testing::random_tensor;

TEST(DenseJacobian, DiagonalConv1x1) {
  Rng rng(80);
  Conv1x1 c("c1", 2, rng);
  c.matrix() = Tensor::matrix({{2, 0}, {0, 3}});
  EXPECT_EQ(dense_jacobian_linear(c, {2, 1, 1}), Tensor::matrix({{2, 0}, {0, 3}}));
}

// y[i, j] = sum_u sum_v Wc[i, u] x[u, v] Ws[v, j], so with row-major (c, n)
// flattening d y[i, j] / d x[u, v] = Wc[i, u] * Ws[v, j].
TEST(DenseJacobian, WoodburyMatchesElementwiseDefinition) {
  Rng rng(81);
  Woodbury wb("wb", 2, 1, 3, 1, 1, rng);
  perturb_parameters(wb.parameters(), rng, real(0.5));
  const Tensor wc = wb.dense_channel_matrix(), ws = wb.dense_spatial_matrix();
  const Tensor jac = dense_jacobian_linear(wb, {2, 1, 3});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t u = 0; u < 2; ++u)
        for (std::size_t v = 0; v < 3; ++v) EXPECT_NEAR(jac(i * 3 + j, u * 3 + v), wc(i, u) * ws(v, j), 1e-14);
}

TEST(DenseJacobian, RefusesHugeInputs) {
  Squeeze sq("sq");
  EXPECT_THROW(dense_jacobian_linear(sq, {1, 66, 64}), ContractError);
}

TEST(FdJacobian, AgreesWithExactColumnsOnLinearLayers) {
  Rng rng(82);
  MEWoodbury me("me", 2, 2, 3, 2, 2, 2, rng);
  perturb_parameters(me.parameters(), rng, real(0.4));
  const Tensor x = random_tensor({1, 2, 2, 3}, rng);
  EXPECT_LT(max_abs_diff(fd_jacobian(me, x, real(1e-5)), dense_jacobian_linear(me, {2, 2, 3})), 1e-6);
}

TEST(FdJacobian, IdentityLayer) {
  ActNorm an("an", 2);
  an.set(Tensor::vector({1, 1}), Tensor::vector({0, 0}));
  Rng rng(83);
  const Tensor x = random_tensor({1, 2, 2, 2}, rng);
  EXPECT_LT(max_abs_diff(fd_jacobian(an, x, real(1e-5)), Tensor::identity(8)), 1e-9);
}

TEST(FdJacobian, CouplingAtZeroInitIsBlockTriangular) {
  Rng rng(84);
  AffineCoupling cp("cp", 2, 4, rng);
  perturb_parameters({cp.parameters()[0], cp.parameters()[2]}, rng, real(0.3));
  const Tensor x = random_tensor({1, 2, 2, 2}, rng);
  const Tensor jac = fd_jacobian(cp, x, real(1e-5));
  const real s = 0.8807970779778823;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      const bool a_row = i < 4, a_col = j < 4;
      real expected = 0;
      if (i == j) expected = a_row ? 1 : s;
      if (a_row || !a_col) EXPECT_NEAR(jac(i, j), expected, 1e-9) << i << "," << j;
    }
}

TEST(BruteLogdet, Basics) {
  EXPECT_EQ(brute_logdet(Tensor::identity(5)).logabs, 0);
  const auto perm = brute_logdet(Tensor::matrix({{0, 0, 1}, {1, 0, 0}, {0, 1, 0}}));
  EXPECT_EQ(perm.logabs, 0);
  EXPECT_EQ(perm.sign, 1);
  EXPECT_EQ(brute_logdet(Tensor::matrix({{0, 1}, {1, 0}})).sign, -1);
  EXPECT_EQ(brute_logdet(Tensor::matrix({{1, 2}, {2, 4}})).sign, 0);
}

TEST(BruteLogdet, AgreesWithPartialPivotLu) {
  Rng rng(85);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = random_tensor({20, 20}, rng);
    const auto full = brute_logdet(a), partial = slogdet_lu(a);
    EXPECT_EQ(full.sign, partial.sign);
    EXPECT_NEAR(full.logabs, partial.logabs, 1e-10);
  }
}

// Fifty random draws per linear layer kind, D <= 60.
TEST(OracleProperty, LinearLayersWithinTight) {
  Rng rng(86);
  for (int trial = 0; trial < 50; ++trial) {
    Conv1x1 c1("c1", 3, rng);
    Woodbury wb("wb", 3, 4, 5, 2, 4, rng);
    MEWoodbury me("me", 3, 4, 5, 2, 3, 3, rng);
    ActNorm an("an", 3);
    an.set(random_tensor({3}, rng), random_tensor({3}, rng));
    for (FlowLayer* l : std::vector<FlowLayer*>{&c1, &wb, &me, &an}) {
      perturb_parameters(l->parameters(), rng, real(0.2));
      const real analytic = l->evaluate(Tensor({1, 3, 4, 5})).logdet[0];
      EXPECT_NEAR(analytic, brute_logdet(dense_jacobian_linear(*l, {3, 4, 5})).logabs, 1e-8) << l->kind();
    }
  }
}

TEST(OracleProperty, CouplingWithinFiniteDifferenceTolerance) {
  Rng rng(87);
  for (int trial = 0; trial < 50; ++trial) {
    AffineCoupling cp("cp", 3, 4, rng);
    perturb_parameters(cp.parameters(), rng, real(0.3));
    const Tensor x = random_tensor({1, 3, 4, 5}, rng);
    EXPECT_NEAR(cp.evaluate(x).logdet[0], brute_logdet(fd_jacobian(cp, x, real(1e-5))).logabs, 1e-4);
  }
}
