#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles/enumeration.hpp"
#include "wuglab/stats.hpp"

using namespace wuglab::stats;

namespace {

std::vector<double> random_ints(std::mt19937& rng, int n, int hi) {
  std::uniform_int_distribution<int> d(0, hi);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST(MannWhitney, SeparatedTriplesGiveTenPercent) {
  auto r = mann_whitney_u({"a", {1, 2, 3}}, {"b", {4, 5, 6}});
  EXPECT_EQ(r.statistic, 0);
  EXPECT_NEAR(r.p_value, 0.1, 1e-15);
  EXPECT_EQ(r.method, "exact");
}

TEST(MannWhitney, IdenticalMultisetsGiveOne) {
  auto r = mann_whitney_u({"a", {0.5, 0.6, 0.6}}, {"b", {0.6, 0.5, 0.6}});
  EXPECT_DOUBLE_EQ(r.p_value, 1.0);
}

TEST(MannWhitney, MatchesEnumerationForAllSmallSizes) {
  std::mt19937 rng(1);
  for (int na = 1; na <= 6; ++na)
    for (int nb = 1; nb <= 6; ++nb)
      for (int rep = 0; rep < 4; ++rep) {
        // Small value range forces ties.
        auto a = random_ints(rng, na, 4), b = random_ints(rng, nb, 4);
        const double want = oracle::mwu_two_sided(a, b);
        const auto got = mann_whitney_u({"a", a}, {"b", b});
        ASSERT_NEAR(got.p_value, want, 1e-12) << "na=" << na << " nb=" << nb;
      }
}

TEST(MannWhitney, NormalApproximationIsCloseForModerateSamples) {
  std::mt19937 rng(2);
  std::normal_distribution<double> d;
  std::vector<double> a(25), b(25);
  for (auto& x : a) x = d(rng);
  for (auto& x : b) x = d(rng) + 0.5;
  const auto ex = mann_whitney_u({"a", a}, {"b", b}, true);
  const auto nm = mann_whitney_u({"a", a}, {"b", b}, false);
  EXPECT_EQ(nm.method, "normal");
  EXPECT_NEAR(ex.p_value, nm.p_value, 0.01);
}

TEST(Jonckheere, PerfectOrderOfSingletons) {
  auto r = jonckheere_terpstra({{"1", {1}}, {"2", {2}}, {"3", {3}}, {"4", {4}}});
  EXPECT_NEAR(r.p_value, 1.0 / 24.0, 1e-15);
  EXPECT_DOUBLE_EQ(*r.effect_size, 1.0);
}

TEST(Jonckheere, ConstantGroupsShowNoTrend) {
  auto r = jonckheere_terpstra({{"a", {0.5, 0.5}}, {"b", {0.5, 0.5}}, {"c", {0.5, 0.5}}});
  EXPECT_DOUBLE_EQ(*r.effect_size, 0.0);
  EXPECT_GE(r.p_value, 0.5);
}

TEST(Jonckheere, MatchesFullPermutationUpToEightObservations) {
  std::mt19937 rng(3);
  std::uniform_int_distribution<int> size(1, 3);
  int checked = 0;
  for (int rep = 0; rep < 300; ++rep) {
    const int k = 3 + rep % 2;
    std::vector<SampleGroup> g;
    std::vector<std::vector<double>> raw;
    int total = 0;
    for (int i = 0; i < k; ++i) {
      int n = size(rng);
      if (total + n > 8) n = std::max(1, 8 - total);
      total += n;
      raw.push_back(random_ints(rng, n, 3));
      g.push_back({std::to_string(i), raw.back()});
    }
    if (total > 8) continue;
    const auto got = jonckheere_terpstra(g);
    ASSERT_EQ(got.method, "exact");
    ASSERT_NEAR(got.p_value, oracle::jt_upper(raw), 1e-12);
    ASSERT_DOUBLE_EQ(got.statistic, oracle::jt_statistic(raw));
    ++checked;
  }
  EXPECT_GT(checked, 250);
}

TEST(Jonckheere, LargeSamplesUseSeededMonteCarlo) {
  std::vector<SampleGroup> g;
  for (int i = 0; i < 4; ++i) g.push_back({std::to_string(i), {0.1 * i, 0.1 * i + 0.3, 0.2, 0.4, 0.5, 0.6}});
  const auto a = jonckheere_terpstra(g), b = jonckheere_terpstra(g);
  EXPECT_EQ(a.method, "monte-carlo");
  EXPECT_EQ(a.p_value, b.p_value);
  EXPECT_GT(a.p_value, 0);
  EXPECT_LE(a.p_value, 1);
}

TEST(Jonckheere, FiveSeedsPerGroupRunsExactly) {
  std::vector<SampleGroup> g;
  const double v[4][5] = {{.50, .51, .49, .52, .50}, {.51, .50, .52, .53, .49},
                          {.52, .53, .51, .50, .54}, {.53, .55, .52, .54, .56}};
  for (int i = 0; i < 4; ++i) g.push_back({std::to_string(i), std::vector<double>(v[i], v[i] + 5)});
  const auto r = jonckheere_terpstra(g);
  EXPECT_EQ(r.method, "exact");
  EXPECT_LT(r.p_value, 0.01);
  EXPECT_GT(*r.effect_size, 0.3);
}

TEST(KendallTauB, MatchesTieCorrectedFormula) {
  std::mt19937 rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    auto x = random_ints(rng, 12, 3), y = random_ints(rng, 12, 4);
    double nc = 0, nd = 0, n1 = 0, n2 = 0;
    const double n0 = 12.0 * 11 / 2;
    for (int i = 0; i < 12; ++i)
      for (int j = i + 1; j < 12; ++j) {
        const double s = (x[i] - x[j]) * (y[i] - y[j]);
        nc += s > 0;
        nd += s < 0;
        n1 += x[i] == x[j];
        n2 += y[i] == y[j];
      }
    const double den = std::sqrt((n0 - n1) * (n0 - n2));
    const double want = den > 0 ? (nc - nd) / den : 0.0;
    ASSERT_NEAR(kendall_tau_b(x, y), want, 1e-12);
  }
}

TEST(Tost, JitterAroundHalfIsEquivalent) {
  auto r = tost_equivalence({0.5, 0.5001, 0.4999, 0.5002, 0.4998}, 0.5, 1.0);
  EXPECT_TRUE(r.equivalent);
  EXPECT_LT(r.ci_low, 0.5);
  EXPECT_GT(r.ci_high, 0.5);
}

TEST(Tost, CenteredAtSixtyFiveIsNotEquivalent) {
  std::vector<double> v = {0.63, 0.66, 0.65, 0.67, 0.64};
  auto r = tost_equivalence(v, 0.5, 10.0);
  EXPECT_FALSE(r.equivalent);
  // Direct computation of the upper one-sided t.
  const double m = 0.65;
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  const double se = std::sqrt(ss / 4) / std::sqrt(5.0);
  EXPECT_NEAR(r.mean, m, 1e-12);
  EXPECT_GT(r.p_upper, 0.5);
  EXPECT_NEAR((m - 0.6) / se, 7.0710678118654755, 1e-9);
}

TEST(Tost, ZeroVarianceIsFlaggedAndDecidedByPoint) {
  auto r = tost_equivalence({0.52, 0.52, 0.52}, 0.5, 10.0);
  EXPECT_TRUE(r.degenerate);
  EXPECT_TRUE(r.equivalent);
  EXPECT_EQ(r.ci_low, r.ci_high);
}

TEST(Tost, VerdictIsMonotoneInBound) {
  std::mt19937 rng(5);
  std::normal_distribution<double> d(0.5, 0.03);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> v(5);
    for (auto& x : v) x = d(rng) + (rep % 7) * 0.01;
    if (tost_equivalence(v, 0.5, 5.0).equivalent) {
      ASSERT_TRUE(tost_equivalence(v, 0.5, 10.0).equivalent);
    }
  }
}

TEST(Binomial, HalfSuccessesGiveOne) { EXPECT_DOUBLE_EQ(binomial_test(5, 10).p_value, 1.0); }

TEST(Binomial, ZeroOfTenMatchesClosedForm) {
  EXPECT_NEAR(binomial_test(0, 10).p_value, 2.0 / 1024.0, 1e-12);
}

TEST(Binomial, MatchesExactIntegerSums) {
  for (int n : {1, 7, 20, 40, 60})
    for (int k = 0; k <= n; ++k) {
      // Under p0 = 0.5 the two-sided p is the mass of outcomes at least as far from n/2.
      const double dist = std::abs(k - n / 2.0);
      unsigned __int128 hit = 0;
      for (int j = 0; j <= n; ++j)
        if (std::abs(j - n / 2.0) >= dist) hit += oracle::choose(n, j);
      const double want = std::min(1.0, static_cast<double>(hit) / std::ldexp(1.0, n));
      ASSERT_NEAR(binomial_test(k, n).p_value, want, 1e-12) << n << " " << k;
      const auto one = binomial_test(k, n, 0.5, Alternative::Greater);
      unsigned __int128 up = 0;
      for (int j = k; j <= n; ++j) up += oracle::choose(n, j);
      ASSERT_NEAR(one.p_value, static_cast<double>(up) / std::ldexp(1.0, n), 1e-12);
    }
}

TEST(Binomial, TwoSidedIsAtLeastOneSided) {
  for (int k = 0; k <= 30; ++k) {
    const double two = binomial_test(k, 30, 0.3).p_value;
    EXPECT_GE(two + 1e-15, std::min(binomial_test(k, 30, 0.3, Alternative::Greater).p_value,
                                    binomial_test(k, 30, 0.3, Alternative::Less).p_value));
    EXPECT_LE(two, 1.0);
    EXPECT_GE(two, 0.0);
  }
}

TEST(Binomial, SwapScaleAccuracyIsSignificant) {
  EXPECT_LT(binomial_test(16, 80).p_value, 1e-3);
  EXPECT_LT(binomial_test(78, 80).p_value, 1e-3);
}

TEST(PairedT, EqualSamplesAreFlagged) {
  auto r = paired_t({1, 2, 3}, {1, 2, 3});
  EXPECT_EQ(r.statistic, 0);
  EXPECT_EQ(r.p_value, 1);
  ASSERT_EQ(r.flags.size(), 1u);
}

TEST(PairedT, MatchesHandFormula) {
  const double eps = 1e-3;
  std::vector<double> a = {2, 2, 2, 2, 2, 2 + eps}, b = {1, 1, 1, 1, 1, 1};
  const double m = 1 + eps / 6;
  double ss = 0;
  for (int i = 0; i < 5; ++i) ss += (1 - m) * (1 - m);
  ss += (1 + eps - m) * (1 + eps - m);
  const double t = m / (std::sqrt(ss / 5) / std::sqrt(6.0));
  auto r = paired_t(a, b);
  EXPECT_NEAR(r.statistic, t, 1e-9 * t);
  EXPECT_LT(r.p_value, 1e-3);
}

TEST(Bonferroni, TwoTestsHalveAlpha) {
  auto r = bonferroni({0.02, 0.03}, 0.05);
  EXPECT_DOUBLE_EQ(r.per_test_alpha, 0.025);
  EXPECT_TRUE(r.significant[0]);
  EXPECT_FALSE(r.significant[1]);
  EXPECT_DOUBLE_EQ(r.adjusted[1], 0.06);
}

TEST(Kl, SelfDivergenceIsZero) {
  EXPECT_EQ(kl_divergence({0.2, 0.3, 0.5}, {0.2, 0.3, 0.5}).nats, 0.0);
}

TEST(Kl, BernoulliClosedForm) {
  const double want = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
  EXPECT_NEAR(kl_divergence({0.9, 0.1}, {0.5, 0.5}).nats, want, 1e-12);
  EXPECT_NEAR(want, 0.368, 1e-3);
}

TEST(Kl, ZeroReferenceMassIsFloored) {
  auto r = kl_divergence({0.5, 0.5}, {1.0, 0.0});
  EXPECT_TRUE(r.floored);
  EXPECT_TRUE(std::isfinite(r.nats));
}
