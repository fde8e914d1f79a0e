#pragma once

#include <utility>

namespace tri {

struct BetaPosterior {
  double a = 1.0;
  double b = 1.0;
  double mean() const noexcept { return a / (a + b); }
};

// Conjugate update of a Beta(a0, b0) prior with k successes out of n.
BetaPosterior beta_posterior(long long k, long long n, double a0, double b0);

// Regularized incomplete beta I_x(a, b).
double beta_cdf(double a, double b, double x);
double beta_pdf(double a, double b, double x);

// x with I_x(a, b) = p, to absolute tolerance 1e-10.
double beta_quantile(double a, double b, double p);

// Equal-tailed interval at the given level (e.g. 0.95).
std::pair<double, double> credible_interval(const BetaPosterior& post, double level);

} // namespace tri
