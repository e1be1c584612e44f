#include "evifuse/special_functions.hpp"

#include <cmath>

#include "evifuse/errors.hpp"

namespace evifuse {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;

constexpr double kLanczos[9] = {
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
};

}  // namespace

double log_gamma(double x) {
  if (!std::isfinite(x) || x <= 0.0) throw ParameterDomainError("log_gamma requires finite x > 0");
  if (x < 0.5) {
    // Reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x); sin is positive here.
    return std::log(kPi / std::sin(kPi * x)) - log_gamma(1.0 - x);
  }
  const double z = x - 1.0;
  double a = kLanczos[0];
  for (int i = 1; i < 9; ++i) a += kLanczos[i] / (z + i);
  const double t = z + 7.5;
  return 0.91893853320467274178032973640562 /* log sqrt(2 pi) */
         + (z + 0.5) * std::log(t) - t + std::log(a);
}

double digamma(double x) {
  if (!std::isfinite(x) || x <= 0.0) throw ParameterDomainError("digamma requires finite x > 0");
  double acc = 0.0;
  while (x < 6.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // ln x - 1/(2x) - sum_{n>=1} B_{2n} / (2n x^{2n})
  const double series =
      inv2 * (1.0 / 12.0 -
              inv2 * (1.0 / 120.0 -
                      inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
  return acc + std::log(x) - 0.5 * inv - series;
}

}  // namespace evifuse
