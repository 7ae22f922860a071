#include <set>

#include <gtest/gtest.h>

#include "unfoldkit/rng.hpp"

using namespace unfoldkit;

TEST(DeriveSeed, DeterministicAndPathSensitive) {
  EXPECT_EQ(derive_seed(7, {1, 2}), derive_seed(7, {1, 2}));
  EXPECT_NE(derive_seed(7, {1, 2}), derive_seed(7, {2, 1}));
  EXPECT_NE(derive_seed(7, {1}), derive_seed(8, {1}));
  EXPECT_NE(derive_seed(7, {}), derive_seed(7, {0}));
}

TEST(DeriveSeed, NoCollisionsOverAGrid) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 50; ++a)
    for (std::uint64_t b = 0; b < 50; ++b) seen.insert(derive_seed(3, {a, b}));
  EXPECT_EQ(seen.size(), 2500u);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(a.uniform(), b.uniform());
    EXPECT_EQ(a.normal(1.0, 2.0), b.normal(1.0, 2.0));
  }
}

TEST(Rng, MomentsOfNormalAndUniform) {
  Rng r(1);
  const int n = 200000;
  double s = 0, ss = 0, u = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal(0.5, 2.0);
    s += x;
    ss += x * x;
    const double v = r.uniform();
    ASSERT_GE(v, 0.0);
    ASSERT_LT(v, 1.0);
    u += v;
  }
  const double mean = s / n, var = ss / n - mean * mean;
  EXPECT_NEAR(mean, 0.5, 4 * 2.0 / std::sqrt(n));
  EXPECT_NEAR(std::sqrt(var), 2.0, 0.02);
  EXPECT_NEAR(u / n, 0.5, 4 * std::sqrt(1.0 / 12 / n));
}
