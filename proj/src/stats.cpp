#include "wuglab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "wuglab/error.hpp"
#include "wuglab/rng.hpp"

namespace wuglab::stats {

namespace {

double clamp_p(double p) { return std::clamp(p, 0.0, 1.0); }

// Doubled mid-ranks of `pooled` (so ties stay integral).
std::vector<long> doubled_midranks(const std::vector<double>& pooled) {
  const std::size_t n = pooled.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return pooled[i] < pooled[j]; });
  std::vector<long> r(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && pooled[order[j]] == pooled[order[i]]) ++j;
    // Ranks i+1 .. j, mean (i+1+j)/2, doubled.
    for (std::size_t k = i; k < j; ++k) r[order[k]] = static_cast<long>(i + 1 + j);
    i = j;
  }
  return r;
}

std::vector<std::size_t> tie_sizes(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::vector<std::size_t> t;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    while (j < v.size() && v[j] == v[i]) ++j;
    t.push_back(j - i);
    i = j;
  }
  return t;
}

void require_finite(const std::vector<double>& v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw InvalidArgument(std::string(what) + " contains a non-finite value");
}

// Doubled JT statistic for values split into groups in order.
long jt_doubled(const std::vector<std::vector<double>>& g) {
  long s = 0;
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = i + 1; j < g.size(); ++j)
      for (double x : g[i])
        for (double y : g[j]) s += x < y ? 2 : x == y ? 1 : 0;
  return s;
}

}  // namespace

nlohmann::json TestResult::to_json() const {
  nlohmann::json j = {{"test", test}, {"statistic", statistic}, {"p_value", p_value}, {"method", method}};
  if (effect_size) j["effect_size"] = *effect_size;
  if (ci_low) j["ci_low"] = *ci_low;
  if (ci_high) j["ci_high"] = *ci_high;
  if (!correction.empty()) j["correction"] = correction;
  if (!flags.empty()) j["flags"] = flags;
  return j;
}

double mean(const std::vector<double>& x) {
  if (x.empty()) throw InvalidArgument("mean of an empty sample");
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double sample_sd(const std::vector<double>& x) {
  if (x.size() < 2) throw InvalidArgument("standard deviation needs at least two values");
  const double m = mean(x);
  double ss = 0;
  for (double v : x) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

TestResult mann_whitney_u(const SampleGroup& a, const SampleGroup& b, bool exact) {
  if (a.values.empty() || b.values.empty()) throw InvalidArgument("Mann-Whitney U needs two nonempty groups");
  require_finite(a.values, "sample");
  require_finite(b.values, "sample");
  const std::size_t na = a.values.size(), nb = b.values.size(), n = na + nb;
  std::vector<double> pooled = a.values;
  pooled.insert(pooled.end(), b.values.begin(), b.values.end());
  const auto r2 = doubled_midranks(pooled);
  long r2a = 0;
  for (std::size_t i = 0; i < na; ++i) r2a += r2[i];
  const long base2 = static_cast<long>(na * (na + 1));
  const long u2 = r2a - base2;  // doubled U for a
  const long center2 = static_cast<long>(na * nb);  // doubled mean of U (= 2 * na nb / 2)

  TestResult res;
  res.test = "mann-whitney-u";
  res.statistic = static_cast<double>(u2) / 2.0;
  res.effect_size = static_cast<double>(u2) / static_cast<double>(2 * na * nb);  // common-language effect size

  if (exact && n <= 60) {
    // dp[k][s]: number of size-k subsets whose doubled rank sum is s.
    const long total2 = std::accumulate(r2.begin(), r2.end(), 0L);
    std::vector<std::vector<double>> dp(na + 1, std::vector<double>(static_cast<std::size_t>(total2) + 1, 0.0));
    dp[0][0] = 1;
    for (std::size_t i = 0; i < n; ++i) {
      const auto w = static_cast<std::size_t>(r2[i]);
      for (std::size_t k = std::min(i + 1, na); k >= 1; --k)
        for (std::size_t s = static_cast<std::size_t>(total2); s >= w; --s) dp[k][s] += dp[k - 1][s - w];
    }
    double hit = 0, all = 0;
    const long dev = std::labs(u2 - center2);
    for (std::size_t s = 0; s < dp[na].size(); ++s) {
      if (dp[na][s] == 0) continue;
      all += dp[na][s];
      if (std::labs(static_cast<long>(s) - base2 - center2) >= dev) hit += dp[na][s];
    }
    res.p_value = clamp_p(hit / all);
    res.method = "exact";
  } else {
    double tie_term = 0;
    for (auto t : tie_sizes(pooled)) tie_term += static_cast<double>(t * t * t - t);
    const double dn = static_cast<double>(n);
    const double var = static_cast<double>(na * nb) / 12.0 * ((dn + 1) - tie_term / (dn * (dn - 1)));
    const double dev = std::abs(res.statistic - static_cast<double>(na * nb) / 2.0);
    if (var <= 0) {
      res.p_value = 1;
      res.flags.push_back("zero-variance");
    } else {
      const double z = std::max(0.0, dev - 0.5) / std::sqrt(var);
      res.p_value = clamp_p(2 * boost::math::cdf(boost::math::complement(boost::math::normal(), z)));
    }
    res.method = "normal";
    if (exact) res.flags.push_back("exact-unavailable");
  }
  return res;
}

double kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw InvalidArgument("tau-b needs paired samples");
  double conc = 0, disc = 0, tx = 0, ty = 0;
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      if (dx == 0 && dy == 0) continue;
      if (dx == 0) ++tx;
      else if (dy == 0) ++ty;
      else if ((dx > 0) == (dy > 0)) ++conc;
      else ++disc;
    }
  const double denom = std::sqrt((conc + disc + tx) * (conc + disc + ty));
  return denom > 0 ? (conc - disc) / denom : 0.0;
}

TestResult jonckheere_terpstra(const std::vector<SampleGroup>& groups, bool exact) {
  if (groups.size() < 3) throw InvalidArgument("Jonckheere-Terpstra needs at least three groups");
  std::vector<std::vector<double>> g;
  std::vector<double> idx, vals;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i].values.empty()) throw InvalidArgument("Jonckheere-Terpstra group '" + groups[i].label + "' is empty");
    require_finite(groups[i].values, "sample");
    g.push_back(groups[i].values);
    for (double v : groups[i].values) {
      idx.push_back(static_cast<double>(i));
      vals.push_back(v);
    }
  }
  const long obs2 = jt_doubled(g);
  const std::size_t n = vals.size(), k = g.size();

  TestResult res;
  res.test = "jonckheere-terpstra";
  res.statistic = static_cast<double>(obs2) / 2.0;
  res.effect_size = kendall_tau_b(idx, vals);

  if (exact && n <= static_cast<std::size_t>(kJtExactMaxN)) {
    // Walk the distinct values in ascending order; the state is how many
    // items each group has received so far, plus the doubled statistic.
    std::vector<double> sorted = vals;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> blocks = tie_sizes(sorted);
    std::vector<std::size_t> sizes(k), radix(k + 1, 1);
    for (std::size_t i = 0; i < k; ++i) {
      sizes[i] = g[i].size();
      radix[i + 1] = radix[i] * (sizes[i] + 1);
    }
    long max2 = 0;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = i + 1; j < k; ++j) max2 += static_cast<long>(2 * sizes[i] * sizes[j]);
    const std::size_t width = static_cast<std::size_t>(max2) + 1;
    std::vector<std::vector<double>> dp(radix[k]);
    dp[0].assign(width, 0.0);
    dp[0][0] = 1;
    std::vector<double> fact(n + 1, 1.0);
    for (std::size_t i = 1; i <= n; ++i) fact[i] = fact[i - 1] * static_cast<double>(i);

    for (std::size_t c : blocks) {
      std::vector<std::vector<double>> next(radix[k]);
      for (std::size_t st = 0; st < radix[k]; ++st) {
        if (dp[st].empty()) continue;
        std::vector<std::size_t> have(k);
        for (std::size_t i = 0; i < k; ++i) have[i] = (st / radix[i]) % (sizes[i] + 1);
        // Enumerate compositions a of c with a_i <= sizes_i - have_i.
        std::vector<std::size_t> a(k, 0);
        auto emit = [&]() {
          long add = 0;
          double ways = fact[c];
          std::size_t to = st;
          for (std::size_t j = 0; j < k; ++j) {
            ways /= fact[a[j]];
            to += a[j] * radix[j];
            for (std::size_t i = 0; i < j; ++i)
              add += static_cast<long>(2 * have[i] * a[j] + a[i] * a[j]);
          }
          auto& row = next[to];
          if (row.empty()) row.assign(width, 0.0);
          for (std::size_t s = 0; s + static_cast<std::size_t>(add) < width; ++s)
            if (dp[st][s] != 0) row[s + static_cast<std::size_t>(add)] += ways * dp[st][s];
        };
        std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t pos, std::size_t left) {
          if (pos + 1 == k) {
            if (left <= sizes[pos] - have[pos]) {
              a[pos] = left;
              emit();
            }
            return;
          }
          for (std::size_t x = 0; x <= std::min(left, sizes[pos] - have[pos]); ++x) {
            a[pos] = x;
            rec(pos + 1, left - x);
          }
        };
        rec(0, c);
      }
      dp = std::move(next);
    }
    const auto& fin = dp[radix[k] - 1];
    double hit = 0, all = 0;
    for (std::size_t s = 0; s < fin.size(); ++s) {
      all += fin[s];
      if (static_cast<long>(s) >= obs2) hit += fin[s];
    }
    res.p_value = clamp_p(hit / all);
    res.method = "exact";
  } else {
    Pcg32 rng(kMonteCarloSeed);
    std::vector<double> pool = vals;
    long hit = 0;
    std::vector<std::vector<double>> perm(k);
    for (int d = 0; d < kMonteCarloDraws; ++d) {
      rng.shuffle(std::span<double>(pool));
      std::size_t at = 0;
      for (std::size_t i = 0; i < k; ++i) {
        perm[i].assign(pool.begin() + static_cast<long>(at), pool.begin() + static_cast<long>(at + g[i].size()));
        at += g[i].size();
      }
      if (jt_doubled(perm) >= obs2) ++hit;
    }
    res.p_value = clamp_p((static_cast<double>(hit) + 1) / (kMonteCarloDraws + 1));
    res.method = "monte-carlo";
  }
  return res;
}

nlohmann::json TostResult::to_json() const {
  return {{"center", center},   {"bound", bound},     {"mean", mean},         {"p_lower", p_lower},
          {"p_upper", p_upper}, {"ci90_low", ci_low}, {"ci90_high", ci_high}, {"n", n},
          {"equivalent", equivalent}, {"degenerate", degenerate}};
}

TostResult tost_equivalence(const std::vector<double>& values, double center, double bound_pp) {
  if (values.size() < 3) throw InvalidArgument("TOST needs at least three values");
  if (!(bound_pp > 0)) throw InvalidArgument("TOST bound must be positive");
  require_finite(values, "sample");
  TostResult r;
  r.center = center;
  r.bound = bound_pp / 100.0;
  r.n = static_cast<int>(values.size());
  r.mean = mean(values);
  const double sd = sample_sd(values);
  const double se = sd / std::sqrt(static_cast<double>(r.n));
  if (se == 0) {
    r.degenerate = true;
    r.ci_low = r.ci_high = r.mean;
    const bool inside = std::abs(r.mean - center) < r.bound;
    r.p_lower = r.mean > center - r.bound ? 0.0 : 1.0;
    r.p_upper = r.mean < center + r.bound ? 0.0 : 1.0;
    r.equivalent = inside;
    return r;
  }
  const boost::math::students_t t(r.n - 1);
  const double t_lo = (r.mean - (center - r.bound)) / se;
  const double t_hi = (r.mean - (center + r.bound)) / se;
  r.p_lower = clamp_p(boost::math::cdf(boost::math::complement(t, t_lo)));
  r.p_upper = clamp_p(boost::math::cdf(t, t_hi));
  const double q = boost::math::quantile(boost::math::complement(t, 0.05));
  r.ci_low = r.mean - q * se;
  r.ci_high = r.mean + q * se;
  r.equivalent = std::max(r.p_lower, r.p_upper) < 0.05;
  return r;
}

TestResult binomial_test(int successes, int n, double p0, Alternative alt) {
  if (n < 0 || successes < 0 || successes > n) throw InvalidArgument("binomial test needs 0 <= successes <= n");
  if (!(p0 >= 0 && p0 <= 1)) throw InvalidArgument("binomial p0 must lie in [0, 1]");
  TestResult res;
  res.test = "binomial";
  res.statistic = successes;
  res.method = "exact";
  res.effect_size = n ? static_cast<double>(successes) / n : 0.0;
  if (n == 0) {
    res.p_value = 1;
    return res;
  }
  const boost::math::binomial_distribution<double> dist(n, p0);
  auto pmf = [&](int k) { return boost::math::pdf(dist, k); };
  double p = 0;
  switch (alt) {
    case Alternative::Greater:
      for (int k = successes; k <= n; ++k) p += pmf(k);
      break;
    case Alternative::Less:
      for (int k = 0; k <= successes; ++k) p += pmf(k);
      break;
    case Alternative::TwoSided: {
      const double obs = pmf(successes) * (1 + 1e-7);
      for (int k = 0; k <= n; ++k) {
        const double pk = pmf(k);
        if (pk <= obs) p += pk;
      }
      break;
    }
  }
  res.p_value = clamp_p(p);
  return res;
}

TestResult one_sample_t(const std::vector<double>& x, double mu) {
  if (x.size() < 2) throw InvalidArgument("t test needs at least two values");
  require_finite(x, "sample");
  TestResult res;
  res.test = "one-sample-t";
  res.method = "t";
  const double m = mean(x), sd = sample_sd(x);
  const double n = static_cast<double>(x.size());
  res.effect_size = m - mu;
  if (sd == 0) {
    res.flags.push_back("zero-variance");
    res.statistic = m == mu ? 0.0 : std::copysign(INFINITY, m - mu);
    res.p_value = m == mu ? 1.0 : 0.0;
    return res;
  }
  res.statistic = (m - mu) / (sd / std::sqrt(n));
  const boost::math::students_t t(n - 1);
  res.p_value = clamp_p(2 * boost::math::cdf(boost::math::complement(t, std::abs(res.statistic))));
  const double q = boost::math::quantile(boost::math::complement(t, 0.025));
  res.ci_low = m - q * sd / std::sqrt(n);
  res.ci_high = m + q * sd / std::sqrt(n);
  return res;
}

TestResult paired_t(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw InvalidArgument("paired t needs equal-length samples of size >= 2");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  auto res = one_sample_t(d, 0.0);
  res.test = "paired-t";
  return res;
}

BonferroniResult bonferroni(const std::vector<double>& pvals, double alpha) {
  BonferroniResult r;
  const double m = static_cast<double>(std::max<std::size_t>(1, pvals.size()));
  r.per_test_alpha = alpha / m;
  for (double p : pvals) {
    if (!(p >= 0 && p <= 1)) throw InvalidArgument("p-values must lie in [0, 1]");
    r.adjusted.push_back(std::min(1.0, p * m));
    r.significant.push_back(p < r.per_test_alpha);
  }
  return r;
}

KlResult kl_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size() || p.empty()) throw InvalidArgument("KL needs two distributions of equal size");
  KlResult r;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0 || q[i] < 0) throw InvalidArgument("probabilities must be nonnegative");
    if (p[i] == 0) continue;
    double qi = q[i];
    if (qi < kKlFloor) {
      qi = kKlFloor;
      r.floored = true;
    }
    r.nats += p[i] * std::log(p[i] / qi);
  }
  return r;
}

}  // namespace wuglab::stats
