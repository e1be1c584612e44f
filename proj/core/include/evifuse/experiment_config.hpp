#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "evifuse/model.hpp"
#include "evifuse/training.hpp"

namespace evifuse {

// Modifications applied to the fusion model's run: drop the cross branch,
// replace inter fusion with plain delta averaging, or score with the cross
// branch's output alone (no inter fusion).
struct AblationFlags {
  bool disable_cross_branch = false;
  bool average_fusion = false;
  bool disable_inter_fusion = false;
};

// One experiment: benchmark seeds, model shape, training budget, the
// variant rows to produce, and output handling. Parsed from sectioned
// key=value text ([benchmark], [network], [training], [run], [ablation]).
struct ExperimentConfig {
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  NetworkConfig network;
  TrainConfig training;
  std::vector<std::string> variants;  // empty means all known variants
  std::string out_dir = "results";
  int adapt_samples = 100;
  int adapt_batches = 100;
  std::pair<int, int> stage_split = {4, 1};
  int threads = 0;  // 0 = one per seed up to the hardware
  bool save_checkpoints = false;
  AblationFlags ablation;

  std::vector<std::string> effective_variants() const;
  void validate() const;
};

// single_0 single_1 simple_mix balanced_mix avg_fusion inter_fusion eif
const std::vector<std::string>& known_variants();

// Throws ConfigError naming the offending section.key on any problem.
ExperimentConfig parse_experiment_config(std::istream& in);
ExperimentConfig parse_experiment_config_file(const std::string& path);

}  // namespace evifuse
