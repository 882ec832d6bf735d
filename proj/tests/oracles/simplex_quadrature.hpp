#pragma once

// Numerical Dirichlet-multinomial likelihood: integrates prod theta^c against
// the Dirichlet density over the simplex with nested tanh-sinh quadrature.
// The normalizer is integrated the same way, so no gamma function is used.

#include <cmath>
#include <stdexcept>
#include <vector>

#include <boost/math/quadrature/tanh_sinh.hpp>

namespace oracle {

// tanh-sinh passes xc = -x near 0 and xc = 1 - x near 1.
inline double one_minus(double x, double xc) { return xc > 0 ? xc : 1.0 - x; }

// log E_theta[prod_v theta_v^{c_v}], theta ~ Dirichlet(a), for up to 3 values.
inline double log_dm_sequence(const std::vector<double>& a, const std::vector<int>& c) {
  boost::math::quadrature::tanh_sinh<double> q;
  const std::size_t v = a.size();
  if (v == 1) return 0.0;
  if (v == 2) {
    auto num = [&](double x, double xc) {
      return std::pow(x, a[0] - 1 + c[0]) * std::pow(one_minus(x, xc), a[1] - 1 + c[1]);
    };
    auto den = [&](double x, double xc) { return std::pow(x, a[0] - 1) * std::pow(one_minus(x, xc), a[1] - 1); };
    return std::log(q.integrate(num, 0.0, 1.0)) - std::log(q.integrate(den, 0.0, 1.0));
  }
  if (v == 3) {
    // theta = (x, (1-x) y, (1-x)(1-y)); Jacobian (1-x).
    auto outer = [&](const std::vector<int>& cc) {
      return q.integrate(
          [&](double x, double xc) {
            const double inner = q.integrate(
                [&](double y, double yc) {
                  return std::pow(y, a[1] - 1 + cc[1]) * std::pow(one_minus(y, yc), a[2] - 1 + cc[2]);
                },
                0.0, 1.0);
            const double r = one_minus(x, xc);
            return std::pow(x, a[0] - 1 + cc[0]) * std::pow(r, a[1] + a[2] - 1 + cc[1] + cc[2]) * inner;
          },
          0.0, 1.0);
    };
    return std::log(outer(c)) - std::log(outer({0, 0, 0}));
  }
  throw std::invalid_argument("quadrature oracle handles at most 3 values");
}

}  // namespace oracle
