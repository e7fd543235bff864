#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "woodflow/errors.hpp"
#include "woodflow/linalg.hpp"

using namespace woodflow;
using woodflow::testing::cofactor_det;
using woodflow::testing::naive_matmul;
using woodflow::testing::near_identity;
using woodflow::testing::random_tensor;

TEST(Tensor, ShapeAndRowMajorLayout) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  for (std::size_t i = 0; i < 24; ++i) t[i] = static_cast<real>(i);
  // (i, j, k) -> i * 12 + j * 4 + k
  EXPECT_EQ(t[1 * 12 + 2 * 4 + 3], 23);
  EXPECT_THROW(Tensor({2, 2}, std::vector<real>{1, 2, 3}), DimensionError);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(Tensor::identity(2), a), a);
}

TEST(Matmul, HandComputedTwoByTwo) {
  const Tensor out = matmul(Tensor::matrix({{1, 0}, {1, 0}}), Tensor::matrix({{3}, {4}}));
  EXPECT_EQ(out, Tensor::matrix({{3}, {3}}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(11);
  const Tensor a = random_tensor({5, 7}, rng), b = random_tensor({7, 3}, rng);
  EXPECT_LT(max_abs_diff(matmul(a, b), naive_matmul(a, b)), 1e-12);
  EXPECT_LT(max_abs_diff(matmul_tn(transpose(a), b), naive_matmul(a, b)), 1e-12);
  EXPECT_LT(max_abs_diff(matmul_nt(a, transpose(b)), naive_matmul(a, b)), 1e-12);
}

TEST(Matmul, InnerMismatchThrows) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST(Matmul, AssociativeOnRandomTriples) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.below(16), k = 1 + rng.below(16), l = 1 + rng.below(16), n = 1 + rng.below(16);
    const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, l}, rng), c = random_tensor({l, n}, rng);
    const Tensor left = matmul(matmul(a, b), c), right = matmul(a, matmul(b, c));
    EXPECT_LE(max_abs_diff(left, right), 1e-9 * std::max<real>(1, max_abs(left)));
  }
}

TEST(SlogdetLu, Identity) {
  const auto d = slogdet_lu(Tensor::identity(3));
  EXPECT_EQ(d.sign, 1);
  EXPECT_EQ(d.logabs, 0);
}

TEST(SlogdetLu, Diagonal) {
  const auto d = slogdet_lu(Tensor::matrix({{2, 0}, {0, 3}}));
  EXPECT_EQ(d.sign, 1);
  EXPECT_NEAR(d.logabs, std::log(6.0), 1e-15);
}

TEST(SlogdetLu, Permutation) {
  const auto d = slogdet_lu(Tensor::matrix({{0, 1}, {1, 0}}));
  EXPECT_EQ(d.sign, -1);
  EXPECT_EQ(d.logabs, 0);
}

TEST(SlogdetLu, SingularReportsZeroSign) {
  const auto d = slogdet_lu(Tensor::matrix({{1, 2}, {2, 4}}));
  EXPECT_TRUE(d.singular());
  EXPECT_THROW(require_nonsingular(d, "test"), SingularMatrixError);
}

TEST(SlogdetLu, MatchesCofactorExpansion) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = random_tensor({4, 4}, rng);
    const real det = cofactor_det(a);
    const auto d = slogdet_lu(a);
    EXPECT_EQ(d.sign, det > 0 ? 1 : -1);
    EXPECT_NEAR(std::exp(d.logabs), std::abs(det), 1e-10 * std::abs(det));
  }
}

TEST(SlogdetLu, ProductRule) {
  Rng rng(14);
  for (int trial = 0; trial < 30; ++trial) {
    const Tensor a = random_tensor({6, 6}, rng), b = random_tensor({6, 6}, rng);
    const auto da = slogdet_lu(a), db = slogdet_lu(b), dab = slogdet_lu(matmul(a, b));
    EXPECT_NEAR(dab.logabs, da.logabs + db.logabs, 1e-8);
    EXPECT_EQ(dab.sign, da.sign * db.sign);
  }
}

TEST(InverseSmall, Identity) { EXPECT_EQ(inverse_small(Tensor::identity(4)), Tensor::identity(4)); }

TEST(InverseSmall, UnipotentShear) {
  EXPECT_EQ(inverse_small(Tensor::matrix({{1, 1}, {0, 1}})), Tensor::matrix({{1, -1}, {0, 1}}));
}

TEST(InverseSmall, ResidualOnRandomWellConditioned) {
  Rng rng(15);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = near_identity(8, rng, real(1));
    const Tensor r = matmul(a, inverse_small(a)) - Tensor::identity(8);
    real inf = 0;
    for (std::size_t i = 0; i < 8; ++i) {
      real row = 0;
      for (std::size_t j = 0; j < 8; ++j) row += std::abs(r(i, j));
      inf = std::max(inf, row);
    }
    EXPECT_LT(inf, 1e-10);
  }
}

TEST(InverseSmall, SingularNamesRequester) {
  try {
    inverse_small(Tensor::matrix({{1, 2}, {2, 4}}), "level0.step0.woodbury");
    FAIL() << "expected SingularMatrixError";
  } catch (const SingularMatrixError& e) {
    EXPECT_EQ(e.where(), "level0.step0.woodbury");
  }
}

TEST(ReshapePermute, LeadingAxisMerge) {
  const Tensor x({1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(reshape_permute(x, {0, 1, 2}, {2, 2}), Tensor::matrix({{1, 2}, {3, 4}}));
}

TEST(ReshapePermute, SwapsHeightAndWidth) {
  const Tensor x({1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(reshape_permute(x, {0, 2, 1}, {1, 2, 2}), Tensor({1, 2, 2}, {1, 3, 2, 4}));
}

TEST(ReshapePermute, RoundTripIsBitExact) {
  Rng rng(16);
  const Tensor x = random_tensor({2, 3, 4, 5}, rng);
  const std::vector<std::size_t> axes{0, 1, 3, 2};
  const Tensor y = reshape_permute(x, axes, {2 * 3 * 5, 4});
  const Tensor back = reshape_permute(y.reshaped({2, 3, 5, 4}), inverse_permutation(axes), {2, 3, 4, 5});
  EXPECT_EQ(back, x);
}

TEST(ReshapePermute, ElementCountMismatchThrows) {
  EXPECT_THROW(reshape_permute(Tensor({2, 3}), {1, 0}, {7}), DimensionError);
}

TEST(Conv2d, MatchesDirectSum) {
  Rng rng(17);
  const Tensor x = random_tensor({2, 3, 4, 5}, rng), w = random_tensor({2, 3, 3, 3}, rng), b = random_tensor({2}, rng);
  const Tensor y = conv2d(x, w, b);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 2; ++o)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
          real s = b[o];
          for (std::size_t c = 0; c < 3; ++c)
            for (int di = -1; di <= 1; ++di)
              for (int dj = -1; dj <= 1; ++dj) {
                const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
                if (ii < 0 || jj < 0 || ii >= 4 || jj >= 5) continue;
                s += w[((o * 3 + c) * 3 + static_cast<std::size_t>(di + 1)) * 3 + static_cast<std::size_t>(dj + 1)] *
                     x[((n * 3 + c) * 4 + static_cast<std::size_t>(ii)) * 5 + static_cast<std::size_t>(jj)];
              }
          EXPECT_NEAR(y[((n * 2 + o) * 4 + i) * 5 + j], s, 1e-12);
        }
}

TEST(Rng, StreamsAreReproducibleAndDistinct) {
  Rng a(5), b(5);
  EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(Rng(5).stream(1).next_u64(), Rng(5).stream(2).next_u64());
  Rng u(9);
  double mean = 0;
  for (int i = 0; i < 20000; ++i) {
    const double v = u.uniform();
    ASSERT_GE(v, 0.0);
    ASSERT_LT(v, 1.0);
    mean += v;
  }
  EXPECT_NEAR(mean / 20000, 0.5, 0.01);
}
