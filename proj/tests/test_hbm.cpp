#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "oracles/simplex_quadrature.hpp"
#include "wuglab/hbm.hpp"

using namespace wuglab;
using namespace wuglab::hbm;

namespace {

CountMatrix matrix(int values, std::vector<std::vector<int>> rows) {
  CountMatrix m;
  m.n_values = values;
  for (std::size_t i = 0; i < rows.size(); ++i) m.kind_ids.push_back(static_cast<int>(i));
  m.rows = std::move(rows);
  return m;
}

double oracle_loglik(const CountMatrix& m, double alpha, const std::vector<double>& beta) {
  std::vector<double> a;
  for (double b : beta) a.push_back(alpha * b);
  double s = 0;
  for (const auto& r : m.rows) s += oracle::log_dm_sequence(a, r);
  return s;
}

}  // namespace

TEST(HbmLikelihood, SingleObservationUnderUniformBase) {
  auto m = matrix(10, {{0, 0, 0, 1, 0, 0, 0, 0, 0, 0}});
  const std::vector<double> beta(10, 0.1);
  for (double a : {0.01, 1.0, 100.0}) EXPECT_NEAR(log_marginal_likelihood(m, a, beta), std::log(0.1), 1e-12);
}

TEST(HbmLikelihood, LargeAlphaApproachesIidUniform) {
  auto m = matrix(3, {{2, 1, 1}, {0, 3, 1}});
  const std::vector<double> beta(3, 1.0 / 3);
  // Deviation from the limit is O(n^2 / alpha); lgamma cancellation grows with alpha.
  EXPECT_NEAR(log_marginal_likelihood(m, 1e6, beta), 8 * std::log(1.0 / 3), 1e-4);
}

TEST(HbmLikelihood, TwoKindsThreeValuesMatchQuadrature) {
  auto m = matrix(3, {{2, 0, 0}, {0, 2, 0}});
  const std::vector<double> beta(3, 1.0 / 3);
  EXPECT_NEAR(log_marginal_likelihood(m, 1.0, beta), oracle_loglik(m, 1.0, beta), 1e-3);
}

// Every row with up to 3 values and counts up to 4 is checked against the
// oracle. Kinds are independent, so a matrix's oracle value is the sum of its
// rows'; all 2-kind matrices and a strided sweep of 3-kind ones are compared.
TEST(HbmLikelihood, AllToyInstancesMatchQuadrature) {
  const std::vector<double> alphas = {0.3, 1.0, 4.0};
  for (int v = 1; v <= 3; ++v) {
    std::vector<std::vector<double>> betas = {std::vector<double>(static_cast<std::size_t>(v), 1.0 / v)};
    if (v == 2) betas.push_back({0.7, 0.3});
    if (v == 3) betas.push_back({0.5, 0.3, 0.2});
    std::vector<std::vector<int>> rows;
    const int per = static_cast<int>(std::pow(5, v));
    for (int code = 0; code < per; ++code) {
      std::vector<int> r;
      for (int c = code, i = 0; i < v; ++i, c /= 5) r.push_back(c % 5);
      rows.push_back(r);
    }
    for (const auto& beta : betas)
      for (double alpha : alphas) {
        std::vector<double> want(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
          want[i] = oracle_loglik(matrix(v, {rows[i]}), alpha, beta);
          ASSERT_NEAR(log_marginal_likelihood(matrix(v, {rows[i]}), alpha, beta), want[i], 1e-3)
              << "v=" << v << " alpha=" << alpha << " row=" << i;
        }
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t j = i; j < rows.size(); ++j) {
            ASSERT_NEAR(log_marginal_likelihood(matrix(v, {rows[i], rows[j]}), alpha, beta), want[i] + want[j], 1e-3);
            // Three-kind matrices on a stride keep the sweep fast.
            if ((i + j) % 7 != 0) continue;
            for (std::size_t k = j; k < rows.size(); k += 3)
              ASSERT_NEAR(log_marginal_likelihood(matrix(v, {rows[i], rows[j], rows[k]}), alpha, beta),
                          want[i] + want[j] + want[k], 1e-3);
          }
      }
  }
}

TEST(HbmGrid, WeightsSumToOneAndSpanTheRange) {
  auto g = default_grid();
  EXPECT_EQ(g.alpha.size(), 200u);
  EXPECT_DOUBLE_EQ(g.alpha.front(), 1e-3);
  EXPECT_NEAR(g.alpha.back(), 1e3, 1e-9);
  EXPECT_NEAR(std::accumulate(g.weight.begin(), g.weight.end(), 0.0), 1.0, 1e-12);
}

TEST(HbmPosterior, AllZeroCountsReturnThePrior) {
  auto m = matrix(10, {std::vector<int>(10, 0), std::vector<int>(10, 0)});
  auto g = default_grid();
  auto p = fit_posterior(m, g);
  EXPECT_TRUE(p.degenerate);
  for (std::size_t i = 0; i < g.weight.size(); ++i) ASSERT_NEAR(p.weight[i], g.weight[i], 1e-12);
}

TEST(HbmPosterior, UniformRowsPreferLargerAlphaThanKeyedRows) {
  CountMatrix keyed = matrix(4, {{8, 0, 0, 0}, {0, 8, 0, 0}, {0, 0, 8, 0}, {0, 0, 0, 8}});
  CountMatrix flat = matrix(4, {{2, 2, 2, 2}, {2, 2, 2, 2}, {2, 2, 2, 2}, {2, 2, 2, 2}});
  const auto pk = fit_posterior(keyed), pf = fit_posterior(flat);
  EXPECT_LT(pk.mean_alpha, pf.mean_alpha);
  // Cross-check the ordering with quadrature-derived posteriors on the same grid.
  auto g = default_grid(60, 0.05, 1e3);
  const std::vector<double> beta(4, 0.25);
  auto quad_mean = [&](const CountMatrix& m) {
    // Four values exceed the oracle's limit; Dirichlet aggregation splits each
    // row into a two-value stage over halves and two conditional stages.
    std::vector<double> lw;
    for (std::size_t i = 0; i < g.alpha.size(); ++i) {
      double s = std::log(g.weight[i]);
      for (const auto& r : m.rows)
        s += oracle::log_dm_sequence({g.alpha[i] * 0.5, g.alpha[i] * 0.5}, {r[0] + r[1], r[2] + r[3]}) +
             oracle::log_dm_sequence({g.alpha[i] * 0.25, g.alpha[i] * 0.25}, {r[0], r[1]}) +
             oracle::log_dm_sequence({g.alpha[i] * 0.25, g.alpha[i] * 0.25}, {r[2], r[3]});
      lw.push_back(s);
    }
    const double mx = *std::max_element(lw.begin(), lw.end());
    double z = 0, m1 = 0;
    for (std::size_t i = 0; i < lw.size(); ++i) {
      z += std::exp(lw[i] - mx);
      m1 += std::exp(lw[i] - mx) * g.alpha[i];
    }
    return m1 / z;
  };
  EXPECT_LT(quad_mean(keyed), quad_mean(flat));
  EXPECT_NEAR(fit_posterior(keyed, g, beta).mean_alpha, quad_mean(keyed), 1e-3 * quad_mean(keyed) + 1e-6);
}

TEST(HbmPredictive, NoObservationsGiveTheBase) {
  auto m = matrix(10, {{5, 0, 0, 0, 0, 0, 0, 0, 0, 0}});
  auto p = fit_posterior(m, default_grid(), std::vector<double>(10, 0.1));
  auto pr = predictive(p, std::vector<int>(10, 0));
  for (double x : pr) EXPECT_NEAR(x, 0.1, 1e-12);
}

TEST(HbmPredictive, SmallAlphaConcentratesOnTheSeenValue) {
  HbmPosterior p;
  p.alpha = {0.005};
  p.weight = {1.0};
  p.beta = std::vector<double>(10, 0.1);
  std::vector<int> obs(10, 0);
  obs[3] = 1;
  auto pr = predictive(p, obs);
  EXPECT_NEAR(pr[3], (1 + 0.005 * 0.1) / 1.005, 1e-12);
  EXPECT_GT(pr[3], 0.99);
}

TEST(HbmPredictive, HugeAlphaReturnsTheBase) {
  HbmPosterior p;
  p.alpha = {1e12};
  p.weight = {1.0};
  p.beta = {0.5, 0.3, 0.2};
  auto pr = predictive(p, {4, 0, 0});
  EXPECT_NEAR(pr[0], 0.5, 1e-9);
  EXPECT_NEAR(pr[2], 0.2, 1e-9);
}

TEST(HbmPredictive, RowsSumToOne) {
  auto m = matrix(10, {{3, 1, 0, 0, 0, 0, 0, 2, 0, 0}, {0, 0, 6, 0, 0, 0, 0, 0, 0, 0}});
  auto p = fit_posterior(m);
  for (int v = 0; v < 10; ++v) {
    std::vector<int> obs(10, 0);
    obs[static_cast<std::size_t>(v)] = v % 3;
    auto pr = predictive(p, obs);
    EXPECT_NEAR(std::accumulate(pr.begin(), pr.end(), 0.0), 1.0, 1e-9);
  }
}

TEST(HbmKl, TwoPointFormulaMatchesDirectSum) {
  EXPECT_EQ(bernoulli_kl(0.3, 0.3), 0.0);
  const double p = 0.5, q = 0.99;
  const double hand = p * std::log(p / q) + (1 - p) * std::log((1 - p) / (1 - q));
  double direct = 0;
  const double ps[2] = {p, 1 - p}, qs[2] = {q, 1 - q};
  for (int i = 0; i < 2; ++i) direct += ps[i] * std::log(ps[i] / qs[i]);
  EXPECT_NEAR(bernoulli_kl(p, q), hand, 1e-15);
  EXPECT_NEAR(bernoulli_kl(p, q), direct, 1e-15);
}

TEST(HbmCorpus, AlphaGradientAcrossConditions) {
  auto alpha = [](corpus::Condition c) {
    return run_for_corpus(corpus::generate_corpus(corpus::make_spec(c, 42))).posterior.mean_alpha;
  };
  using corpus::Condition;
  const double reg = alpha(Condition::Regular), weak = alpha(Condition::WeakLabel25),
               swap = alpha(Condition::FeatureSwap), noise = alpha(Condition::NoiseInjection),
               scr = alpha(Condition::Scrambled), fm = alpha(Condition::FrequencyMatched);
  EXPECT_LE(reg, 0.05);
  EXPECT_LT(reg, weak);
  EXPECT_LT(weak, std::min(swap, noise));
  EXPECT_LT(std::max(swap, noise), scr);
  EXPECT_LT(scr, fm);
  EXPECT_GE(fm, 0.5);
}

TEST(HbmCorpus, CountRowsMatchLabelledExemplars) {
  auto c = corpus::generate_corpus(corpus::make_spec(corpus::Condition::Regular, 42));
  auto m = counts_from_corpus(c);
  EXPECT_EQ(m.n_kinds(), corpus::kTrainKinds);
  std::map<int, int> labelled;
  for (const auto& p : c.provenance)
    if (p.kind_id >= 0 && p.labelled) ++labelled[p.kind_id];
  for (std::size_t k = 0; k < m.rows.size(); ++k) {
    EXPECT_EQ(std::accumulate(m.rows[k].begin(), m.rows[k].end(), 0), labelled[m.kind_ids[k]]);
    // Regular kinds put every labelled exemplar on their key shape.
    EXPECT_EQ(*std::max_element(m.rows[k].begin(), m.rows[k].end()), labelled[m.kind_ids[k]]);
  }
  EXPECT_EQ(CountMatrix::from_csv(m.to_csv()).rows, m.rows);
}

TEST(HbmCorpus, UnlabelledConditionsAreDegenerate) {
  auto c = corpus::generate_corpus(corpus::make_spec(corpus::Condition::BareNoLabel, 42));
  EXPECT_TRUE(run_for_corpus(c).posterior.degenerate);
}
