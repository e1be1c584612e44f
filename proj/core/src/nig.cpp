#include "evifuse/nig.hpp"

#include <cmath>
#include <cstdio>

#include "evifuse/errors.hpp"
#include "evifuse/special_functions.hpp"

namespace evifuse {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;

bool finite_params(const NIGParams& p) {
  return std::isfinite(p.delta) && std::isfinite(p.gamma) && std::isfinite(p.alpha) &&
         std::isfinite(p.beta);
}

[[noreturn]] void throw_domain(const NIGParams& p, const char* what) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s (delta=%g gamma=%g alpha=%g beta=%g)", what, p.delta,
                p.gamma, p.alpha, p.beta);
  throw ParameterDomainError(buf);
}

void check_finite_result(double v, const char* op) {
  if (!std::isfinite(v)) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s produced a non-finite value", op);
    throw NumericRangeError(buf);
  }
}

}  // namespace

bool nig_valid(const NIGParams& p) {
  return finite_params(p) && p.gamma > 0.0 && p.alpha > 1.0 && p.beta > 0.0;
}

void require_valid(const NIGParams& p) {
  if (!nig_valid(p)) throw_domain(p, "invalid NIG parameters");
}

void require_loss_domain(const NIGParams& p) {
  if (!(finite_params(p) && p.gamma > 0.0 && p.alpha >= 1.0 && p.beta > 0.0))
    throw_domain(p, "NIG parameters outside loss domain");
}

double nig_nll(const NIGParams& p, double y) {
  require_loss_domain(p);
  if (!std::isfinite(y)) throw PreconditionError("nig_nll requires finite y");
  const double r = y - p.delta;
  const double omega = 2.0 * p.beta * (1.0 + p.gamma);
  const double arg = r * r * p.gamma + omega;
  const double value = 0.5 * std::log(kPi / p.gamma) - p.alpha * std::log(omega) +
                       (p.alpha + 0.5) * std::log(arg) + log_gamma(p.alpha) -
                       log_gamma(p.alpha + 0.5);
  check_finite_result(value, "nig_nll");
  return value;
}

double nig_reg(const NIGParams& p, double y) {
  require_loss_domain(p);
  if (!std::isfinite(y)) throw PreconditionError("nig_reg requires finite y");
  const double value = std::abs(y - p.delta) * (2.0 * p.gamma + p.alpha);
  check_finite_result(value, "nig_reg");
  return value;
}

EvidentialLossParts evidential_loss(const NIGParams& p, double y, double lambda) {
  if (!(lambda > 0.0) || !std::isfinite(lambda))
    throw PreconditionError("evidential_loss requires lambda > 0");
  EvidentialLossParts parts;
  parts.nll = nig_nll(p, y);
  parts.reg = nig_reg(p, y);
  parts.lambda = lambda;
  parts.total = parts.nll + lambda * parts.reg;
  check_finite_result(parts.total, "evidential_loss");
  return parts;
}

NIGGradient evidential_loss_grad(const NIGParams& p, double y, double lambda) {
  if (!(lambda > 0.0) || !std::isfinite(lambda))
    throw PreconditionError("evidential_loss_grad requires lambda > 0");
  require_loss_domain(p);
  if (!std::isfinite(y)) throw PreconditionError("evidential_loss_grad requires finite y");

  const double r = y - p.delta;
  const double omega = 2.0 * p.beta * (1.0 + p.gamma);
  const double arg = r * r * p.gamma + omega;
  const double sgn = (r > 0.0) - (r < 0.0);

  NIGGradient g;
  g.d_delta = (p.alpha + 0.5) * (-2.0 * r * p.gamma) / arg;
  g.d_gamma = -0.5 / p.gamma - 2.0 * p.alpha * p.beta / omega +
              (p.alpha + 0.5) * (r * r + 2.0 * p.beta) / arg;
  g.d_alpha = -std::log(omega) + std::log(arg) + digamma(p.alpha) - digamma(p.alpha + 0.5);
  g.d_beta = 2.0 * (1.0 + p.gamma) * (-p.alpha / omega + (p.alpha + 0.5) / arg);

  g.d_delta += lambda * -sgn * (2.0 * p.gamma + p.alpha);
  g.d_gamma += lambda * 2.0 * std::abs(r);
  g.d_alpha += lambda * std::abs(r);

  check_finite_result(g.d_delta + g.d_gamma + g.d_alpha + g.d_beta, "evidential_loss_grad");
  return g;
}

NIGParams monig_fuse(const std::vector<NIGParams>& inputs) {
  if (inputs.empty()) throw PreconditionError("monig_fuse requires at least one input");
  for (const NIGParams& p : inputs) require_valid(p);

  const double m = static_cast<double>(inputs.size());
  double gamma_sum = 0.0;
  double weighted_delta = 0.0;
  double alpha_sum = 0.0;
  double beta_sum = 0.0;
  for (const NIGParams& p : inputs) {
    gamma_sum += p.gamma;
    weighted_delta += p.gamma * p.delta;
    alpha_sum += p.alpha;
    beta_sum += p.beta;
  }

  NIGParams fused;
  fused.delta = weighted_delta / gamma_sum;
  fused.gamma = gamma_sum;
  fused.alpha = alpha_sum + 1.0 / m;

  double dispersion = 0.0;
  for (const NIGParams& p : inputs) {
    const double d = p.delta - fused.delta;
    dispersion += p.gamma * d * d;
  }
  fused.beta = beta_sum + dispersion / m;

  check_finite_result(fused.delta + fused.gamma + fused.alpha + fused.beta, "monig_fuse");
  return fused;
}

std::vector<double> fusion_weights(const std::vector<NIGParams>& inputs) {
  if (inputs.empty()) throw PreconditionError("fusion_weights requires at least one input");
  double gamma_sum = 0.0;
  for (const NIGParams& p : inputs) {
    require_valid(p);
    gamma_sum += p.gamma;
  }
  std::vector<double> w;
  w.reserve(inputs.size());
  for (const NIGParams& p : inputs) w.push_back(p.gamma / gamma_sum);
  return w;
}

UncertaintyReport uncertainty(const NIGParams& p) {
  if (!finite_params(p) || p.gamma <= 0.0 || p.beta <= 0.0 || p.alpha <= 1.0 + 1e-9)
    throw_domain(p, "uncertainty requires gamma > 0, beta > 0, alpha > 1 + 1e-9");
  UncertaintyReport r;
  r.prediction = p.delta;
  r.aleatoric = p.beta / (p.alpha - 1.0);
  r.epistemic = p.beta / (p.gamma * (p.alpha - 1.0));
  return r;
}

}  // namespace evifuse
