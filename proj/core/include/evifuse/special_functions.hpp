#pragma once

namespace evifuse {

// log Gamma(x) for x > 0, Lanczos approximation (g = 7, 9 coefficients).
// Absolute error below 1e-10 on [0.5, 50]; the reflection formula covers
// (0, 0.5) so the derivative path stays usable near the lower domain edge.
double log_gamma(double x);

// digamma(x) for x > 0: recurrence lift to x >= 6, then the asymptotic
// Bernoulli series. Absolute error below 1e-8 over the working range.
double digamma(double x);

}  // namespace evifuse
