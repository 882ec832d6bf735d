#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace wuglab::stats {

struct SampleGroup {
  std::string label;
  std::vector<double> values;
};

struct TestResult {
  std::string test;
  double statistic = 0;
  double p_value = 1;
  std::optional<double> effect_size;
  std::optional<double> ci_low;
  std::optional<double> ci_high;
  std::string method;      // "exact", "monte-carlo", "normal", "t"
  std::string correction;  // empty when uncorrected
  std::vector<std::string> flags;

  nlohmann::json to_json() const;
};

enum class Alternative { TwoSided, Greater, Less };

// U counts pairs with a > b (ties count one half). Two-sided p. The exact
// distribution is the permutation distribution of the mid-rank sum.
TestResult mann_whitney_u(const SampleGroup& a, const SampleGroup& b, bool exact = true);

inline constexpr std::uint64_t kMonteCarloSeed = 20240101;
inline constexpr int kMonteCarloDraws = 100000;
inline constexpr int kJtExactMaxN = 20;

// Groups are ordered from the lowest to the highest hypothesized level.
// The statistic sums, over group pairs i < j, the pairs with x_i < x_j (ties
// one half); p is one-sided for an increasing trend. Effect size is Kendall
// tau-b between group index and value.
TestResult jonckheere_terpstra(const std::vector<SampleGroup>& groups, bool exact = true);

// Tie-corrected rank correlation; 0 when either variable is constant.
double kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y);

struct TostResult {
  double center = 0.5;
  double bound = 0.1;  // in proportion units
  double mean = 0;
  double p_lower = 1;  // H0: mean <= center - bound
  double p_upper = 1;  // H0: mean >= center + bound
  double ci_low = 0;   // 90% CI
  double ci_high = 0;
  int n = 0;
  bool equivalent = false;
  bool degenerate = false;  // zero variance; verdict by point comparison

  nlohmann::json to_json() const;
};

TostResult tost_equivalence(const std::vector<double>& values, double center, double bound_pp);

// Exact binomial test. The two-sided p sums every outcome no more likely
// than the observed one.
TestResult binomial_test(int successes, int n, double p0 = 0.5, Alternative alt = Alternative::TwoSided);

TestResult paired_t(const std::vector<double>& a, const std::vector<double>& b);
// One-sample t against mu, two-sided.
TestResult one_sample_t(const std::vector<double>& x, double mu);

struct BonferroniResult {
  double per_test_alpha = 0;
  std::vector<double> adjusted;
  std::vector<bool> significant;
};

BonferroniResult bonferroni(const std::vector<double>& pvals, double alpha = 0.05);

struct KlResult {
  double nats = 0;
  bool floored = false;
};

inline constexpr double kKlFloor = 1e-12;

// KL(p || q) in nats; q entries below the floor are raised to it and flagged.
KlResult kl_divergence(const std::vector<double>& p, const std::vector<double>& q);

double mean(const std::vector<double>& x);
double sample_sd(const std::vector<double>& x);

}  // namespace wuglab::stats
