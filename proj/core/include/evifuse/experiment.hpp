#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "evifuse/experiment_config.hpp"
#include "evifuse/synth_data.hpp"
#include "evifuse/training.hpp"

namespace evifuse {

// Rank correlation with average ranks on ties; 0 when either side has no
// variation. Sizes must match and be >= 2.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// FNV-1a over the file's bytes; the manifest's content hash.
std::uint64_t fnv1a_hash_file(const std::string& path);

struct AdaptationOutcome {
  Metrics before;
  Metrics after;
};

// Everything one seed produced. Diagnostic fields are filled only when the
// full fusion variant ran.
struct SeedResults {
  std::uint64_t seed = 0;
  // variant -> dataset id -> metrics
  std::map<std::string, std::map<std::string, Metrics>> metrics;
  // Share of the larger source's test samples whose strongest regressor
  // lies within one group of the true one (after stage 1).
  double regressor_diag_rate = 0.0;
  // Source test id -> share of samples whose strongest branch is their own.
  std::map<std::string, double> own_branch_rate;
  // Rank correlation between each source's own-branch aleatoric and the
  // injected sigma, pooled over both source test sets. The fused output's
  // aleatoric also carries cross-branch disagreement, so it is written to
  // the pairs CSV but not correlated here.
  double aleatoric_spearman = 0.0;
  double epistemic_source = 0.0;
  double epistemic_ood = 0.0;
  std::map<std::string, AdaptationOutcome> adaptation;  // target id -> outcome
};

struct ExperimentResults {
  ExperimentConfig config;
  std::vector<SeedResults> seeds;

  // Seed means; throw std::out_of_range for variants/datasets never run.
  double mean_euclidean(const std::string& variant, const std::string& dataset) const;
  double mean_component_mae(const std::string& variant, const std::string& dataset) const;
  double mean_diag(double SeedResults::*field) const;
};

// Trains and evaluates every requested variant for every seed (seeds fan
// out over threads; each seed is fully independent and deterministic),
// writing per-seed CSVs, seed-averaged CSVs and a hash manifest under
// cfg.out_dir. On a failed seed the manifest marks it incomplete before
// the error propagates.
ExperimentResults run_experiment(const ExperimentConfig& cfg);

// Aggregates finished run directories into comparison, heatmap and
// uncertainty CSVs under out_dir. Refuses mixed manifest versions;
// incomplete seeds are skipped with a note on stderr.
void write_report(const std::vector<std::string>& run_dirs, const std::string& out_dir);

}  // namespace evifuse
