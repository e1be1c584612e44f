#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "evifuse/tensor.hpp"

namespace evifuse {

class Tape;

// Max relative error between analytic and central finite-difference
// gradients of a scalar graph. `build` gets the tape plus leaf handles for
// `inputs` (in order) and returns the root handle. Steps are
// h_scale * max(1, |coordinate|); errors are relative to
// max(|analytic|, |fd|, 1e-3) so near-zero gradients compare absolutely.
double finite_difference_error(const std::function<int(Tape&, const std::vector<int>&)>& build,
                               const std::vector<Tensor>& inputs, double h_scale = 1e-4);

struct GradCheckCase {
  std::string name;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  bool all_passed() const;
  double worst() const;
};

// Finite-difference audit of the composed losses (stage 1, stage 2, target
// adaptation, L1 baseline) over a spread of model shapes: every parameter
// coordinate of every case is compared. Labels are nudged away from the
// |y - delta| kinks before checking so subgradient choices cannot trip the
// comparison. Deterministic in `seed`.
GradCheckReport run_gradcheck_suite(std::uint64_t seed, double tolerance = 1e-4);

}  // namespace evifuse
