#include <cmath>
#include <initializer_list>

#include <doctest.h>

#include "evifuse/special_functions.hpp"

using evifuse::digamma;
using evifuse::log_gamma;

TEST_CASE("log_gamma matches the standard library across the working range") {
  for (double x = 0.05; x < 50.0; x += 0.173) {
    CHECK(log_gamma(x) == doctest::Approx(std::lgamma(x)).epsilon(1e-10));
  }
}

TEST_CASE("log_gamma known values") {
  CHECK(log_gamma(1.0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(log_gamma(2.0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(log_gamma(0.5) == doctest::Approx(0.5 * std::log(M_PI)).epsilon(1e-12));
  // Gamma(1.5) = sqrt(pi)/2
  CHECK(log_gamma(1.5) == doctest::Approx(std::log(std::sqrt(M_PI) / 2.0)).epsilon(1e-12));
}

TEST_CASE("digamma against the lgamma central difference") {
  for (double x = 0.2; x < 30.0; x += 0.311) {
    const double h = 1e-6 * std::max(1.0, x);
    const double fd = (std::lgamma(x + h) - std::lgamma(x - h)) / (2.0 * h);
    CHECK(digamma(x) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("digamma recurrence digamma(x+1) = digamma(x) + 1/x") {
  for (double x : {0.3, 1.0, 2.5, 7.0, 19.5}) {
    CHECK(digamma(x + 1.0) == doctest::Approx(digamma(x) + 1.0 / x).epsilon(1e-10));
  }
}
