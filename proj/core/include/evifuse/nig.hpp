#pragma once

#include <vector>

namespace evifuse {

// Parameters of a Normal-Inverse-Gamma belief over (mean, variance):
//   y ~ N(mu, var), mu ~ N(delta, var / gamma), var ~ InvGamma(alpha, beta).
// Valid parameters require gamma > 0, alpha > 1, beta > 0. The loss
// functions additionally accept the closure alpha >= 1, where the density
// is still well defined but second moments are not.
struct NIGParams {
  double delta = 0.0;
  double gamma = 1.0;
  double alpha = 2.0;
  double beta = 1.0;
};

bool nig_valid(const NIGParams& p);

// Throws ParameterDomainError when p violates the type invariants.
void require_valid(const NIGParams& p);

// Same but on the closure alpha >= 1 (loss domain).
void require_loss_domain(const NIGParams& p);

// Marginal negative log likelihood of observing y under p.
double nig_nll(const NIGParams& p, double y);

// Evidence regularizer |y - delta| * (2 gamma + alpha).
double nig_reg(const NIGParams& p, double y);

struct EvidentialLossParts {
  double nll = 0.0;
  double reg = 0.0;
  double lambda = 0.0;
  double total = 0.0;  // nll + lambda * reg
};

EvidentialLossParts evidential_loss(const NIGParams& p, double y, double lambda);

struct NIGGradient {
  double d_delta = 0.0;
  double d_gamma = 0.0;
  double d_alpha = 0.0;
  double d_beta = 0.0;
};

// Closed-form partials of evidential_loss(...).total. The |y - delta|
// subgradient at y == delta is taken as 0.
NIGGradient evidential_loss_grad(const NIGParams& p, double y, double lambda);

// M-ary mixture fusion of NIG beliefs. Not associative: fusing M inputs at
// once is the defined operation, chaining binary fusions is a different
// (and wrong) one, so no binary convenience overload exists.
NIGParams monig_fuse(const std::vector<NIGParams>& inputs);

// Normalized evidence weights gamma_i / sum_j gamma_j.
std::vector<double> fusion_weights(const std::vector<NIGParams>& inputs);

struct UncertaintyReport {
  double prediction = 0.0;
  double aleatoric = 0.0;  // E[var] = beta / (alpha - 1)
  double epistemic = 0.0;  // Var[mu] = beta / (gamma (alpha - 1))
};

// Requires alpha > 1 + 1e-9; rejects the boundary instead of emitting
// near-infinite moments.
UncertaintyReport uncertainty(const NIGParams& p);

}  // namespace evifuse
