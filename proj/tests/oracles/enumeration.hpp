#pragma once

// Brute-force permutation oracles for the rank tests. They enumerate every
// assignment of observations to groups and compare raw pairs, without ranks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

// Two-sided exact p for Mann-Whitney U by enumerating all subsets.
inline double mwu_two_sided(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pool = a;
  pool.insert(pool.end(), b.begin(), b.end());
  const std::size_t n = pool.size(), na = a.size();
  auto u_of = [&](const std::vector<bool>& in_a) {
    double u = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (in_a[i] && !in_a[j]) u += pool[i] > pool[j] ? 1.0 : pool[i] == pool[j] ? 0.5 : 0.0;
    return u;
  };
  std::vector<bool> obs(n, false);
  for (std::size_t i = 0; i < na; ++i) obs[i] = true;
  const double center = static_cast<double>(na * b.size()) / 2;
  const double dev = std::abs(u_of(obs) - center);
  std::vector<bool> mask(n, false);
  std::fill(mask.begin(), mask.begin() + static_cast<long>(na), true);
  std::sort(mask.begin(), mask.end());
  long hit = 0, all = 0;
  do {
    ++all;
    if (std::abs(u_of(mask) - center) >= dev - 1e-12) ++hit;
  } while (std::next_permutation(mask.begin(), mask.end()));
  return static_cast<double>(hit) / static_cast<double>(all);
}

inline double jt_statistic(const std::vector<std::vector<double>>& g) {
  double s = 0;
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = i + 1; j < g.size(); ++j)
      for (double x : g[i])
        for (double y : g[j]) s += x < y ? 1.0 : x == y ? 0.5 : 0.0;
  return s;
}

// One-sided (increasing) JT p over every relabelling of the pooled values.
inline double jt_upper(const std::vector<std::vector<double>>& groups) {
  std::vector<double> pool;
  std::vector<int> labels;
  for (std::size_t i = 0; i < groups.size(); ++i)
    for (double v : groups[i]) {
      pool.push_back(v);
      labels.push_back(static_cast<int>(i));
    }
  const double obs = jt_statistic(groups);
  std::sort(labels.begin(), labels.end());
  long hit = 0, all = 0;
  do {
    std::vector<std::vector<double>> g(groups.size());
    for (std::size_t i = 0; i < pool.size(); ++i) g[static_cast<std::size_t>(labels[i])].push_back(pool[i]);
    ++all;
    if (jt_statistic(g) >= obs - 1e-12) ++hit;
  } while (std::next_permutation(labels.begin(), labels.end()));
  return static_cast<double>(hit) / static_cast<double>(all);
}

// Binomial coefficient by exact integer arithmetic (n <= 60).
inline unsigned __int128 choose(int n, int k) {
  unsigned __int128 r = 1;
  for (int i = 1; i <= k; ++i) r = r * static_cast<unsigned>(n - k + i) / static_cast<unsigned>(i);
  return r;
}

}  // namespace oracle
