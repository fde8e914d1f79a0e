#include "tri/beta.hpp"

#include "tri/error.hpp"

#include <boost/math/special_functions/beta.hpp>

#include <cmath>
#include <string>

namespace tri {

BetaPosterior beta_posterior(long long k, long long n, double a0, double b0) {
  if (n < 0 || k < 0 || k > n) throw DomainError("beta_posterior: need 0 <= k <= n");
  if (!(a0 > 0.0) || !(b0 > 0.0)) throw DomainError("beta_posterior: prior parameters must be positive");
  return {a0 + static_cast<double>(k), b0 + static_cast<double>(n - k)};
}

double beta_cdf(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  return boost::math::ibeta(a, b, x);
}

double beta_pdf(double a, double b, double x) {
  if (x <= 0.0 || x >= 1.0) return 0.0;
  return boost::math::ibeta_derivative(a, b, x);
}

double beta_quantile(double a, double b, double p) {
  if (!(a > 0.0) || !(b > 0.0)) throw DomainError("beta_quantile: parameters must be positive");
  if (!(p > 0.0 && p < 1.0)) throw DomainError("beta_quantile: p must lie in (0, 1)");

  // Safeguarded Newton: the bracket [lo, hi] always contains the root and a
  // bisection step replaces any Newton step that leaves it.
  double lo = 0.0, hi = 1.0;
  double x = a / (a + b);
  for (int it = 0; it < 400; ++it) {
    const double f = beta_cdf(a, b, x) - p;
    if (f == 0.0) return x;
    if (f < 0.0) lo = x;
    else hi = x;
    if (hi - lo < 1e-13) return 0.5 * (lo + hi);
    const double d = beta_pdf(a, b, x);
    double next = (d > 0.0 && std::isfinite(d)) ? x - f / d : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - x) < 1e-14) return next;
    x = next;
  }
  throw NumericalError("beta_quantile did not converge for a=" + std::to_string(a) + " b=" + std::to_string(b) +
                       " p=" + std::to_string(p));
}

std::pair<double, double> credible_interval(const BetaPosterior& post, double level) {
  if (!(level > 0.0 && level < 1.0)) throw DomainError("credible level must lie in (0, 1)");
  const double tail = 0.5 * (1.0 - level);
  return {beta_quantile(post.a, post.b, tail), beta_quantile(post.a, post.b, 1.0 - tail)};
}

} // namespace tri
