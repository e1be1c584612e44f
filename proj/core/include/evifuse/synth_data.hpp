#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "evifuse/tensor.hpp"

namespace evifuse {

enum class TargetKind { kPiecewiseSine, kCubicBlend, kSaturatingRamp };

// A scalar function of the input vector. Every kind starts by projecting
// x onto a direction t = w0*x0 + w1*x1 (params[0], params[1]) and differs
// in what it does to t:
//   piecewise-sine : slope*t + (t<0 ? amp_neg : amp_pos) * sin(freq*t)
//                    params: w0 w1 slope amp_neg amp_pos freq
//   cubic-blend    : a3*t^3 + a1*t + a0          params: w0 w1 a3 a1 a0
//   saturating-ramp: scale*tanh(sharp*t) + offset params: w0 w1 scale sharp offset
struct TargetFunction {
  TargetKind kind = TargetKind::kSaturatingRamp;
  std::vector<double> params;

  double eval(const std::vector<double>& x) const;
  void validate(int input_dim) const;
};

// Noise level applies when x[axis] lies in [lo, hi); first match wins.
struct NoiseRegion {
  int axis = 0;
  double lo = 0.0;
  double hi = 0.0;
  double sigma = 0.1;
};

struct DomainSpec {
  std::string domain_id;
  std::vector<double> input_mean;
  std::vector<double> input_spread;
  std::vector<TargetFunction> targets;  // one per output component
  std::vector<NoiseRegion> noise_regions;
  double base_sigma = 0.1;
  // Per-component constant added to the labels: the domain's annotation
  // convention. Empty means zero bias.
  std::vector<double> label_bias;
  std::optional<std::pair<double, double>> label_clip;
  std::size_t sample_count = 1000;

  int input_dim() const { return static_cast<int>(input_mean.size()); }
  int components() const { return static_cast<int>(targets.size()); }
  void validate() const;
  double sigma_at(const std::vector<double>& x) const;
};

struct Dataset {
  std::string domain_id;
  std::vector<std::vector<double>> inputs;  // [n][input_dim]
  std::vector<std::vector<double>> labels;  // [n][components]
  std::vector<double> noise_sigmas;         // [n], true injected sigma

  std::size_t size() const { return inputs.size(); }
  int input_dim() const { return inputs.empty() ? 0 : static_cast<int>(inputs[0].size()); }
  int components() const { return labels.empty() ? 0 : static_cast<int>(labels[0].size()); }
  std::vector<double> component_labels(int d) const;
};

// Inputs are drawn as mean + spread * standard normal per coordinate;
// labels are target(x) plus N(0, sigma(x)^2) noise, optionally clipped.
Dataset generate_domain(const DomainSpec& spec, std::uint64_t seed);

// Fixed desk-scale benchmark: two sources with deliberately conflicting
// target functions on overlapping input regions, two label-narrow targets
// whose input means sit outside one spread of both source means, matching
// source test sets, and a far out-of-distribution probe domain.
struct Benchmark {
  std::vector<Dataset> sources;
  std::vector<Dataset> source_tests;
  std::vector<Dataset> targets;
  Dataset ood;
};

Benchmark make_benchmark(std::uint64_t seed);

// The (sources, targets) view of make_benchmark.
std::pair<std::vector<Dataset>, std::vector<Dataset>> default_benchmark(std::uint64_t seed);

// Deterministic disjoint split with sizes n*r1/(r1+r2) : rest (floor).
// Both parts keep ascending original order.
std::pair<Dataset, Dataset> split_for_stages(const Dataset& ds, std::pair<int, int> ratio,
                                             std::uint64_t seed);

// Row subset in the given order.
Dataset dataset_subset(const Dataset& ds, const std::vector<std::size_t>& rows);

// All inputs as an [n, input_dim] tensor.
Tensor input_tensor(const Dataset& ds);
Tensor input_tensor(const Dataset& ds, const std::vector<std::size_t>& rows);

// Text format: header line "evifuse-dataset v1", then one sample per line,
// comma-separated: domain_id, inputs, labels, sigma. Values round-trip
// exactly (shortest-exact decimal printing).
void write_dataset(const Dataset& ds, std::ostream& out);
void write_dataset_file(const Dataset& ds, const std::string& path);
Dataset read_dataset(std::istream& in);
Dataset read_dataset_file(const std::string& path);

}  // namespace evifuse
