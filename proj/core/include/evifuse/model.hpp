#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "evifuse/nig.hpp"
#include "evifuse/parameters.hpp"
#include "evifuse/partition.hpp"
#include "evifuse/tape.hpp"
#include "evifuse/tensor.hpp"

namespace evifuse {

// Widths and shape of every branch. feature_layer_sizes[l-1] is the width
// of feature layer l (1-based); mff_start_layer is the first depth at
// which the cross branch fuses branch features.
struct NetworkConfig {
  int input_dim = 2;
  std::vector<int> feature_layer_sizes = {96, 96, 96, 96};
  int mff_start_layer = 3;
  int group_count = 4;
  double overlap = 1.5;
  int output_components = 2;

  int depth() const { return static_cast<int>(feature_layer_sizes.size()); }
  void validate() const;
};

// Softplus floors keeping head outputs inside the NIG domain.
inline constexpr double kGammaFloor = 1e-4;
inline constexpr double kAlphaFloor = 1e-4;
inline constexpr double kBetaFloor = 1e-4;

// Extra down-scaling of head weight init so a fresh head emits offsets
// near 0 (predictions start at the group centers) and near-uniform
// evidence. Feature layers use the plain 1/sqrt(fan_in) uniform init.
inline constexpr double kHeadInitScale = 0.05;

struct AffineIds {
  int w = -1;
  int b = -1;
};

struct BranchModule {
  std::string prefix;
  std::string dataset_id;
  std::vector<AffineIds> layers;               // [depth]
  std::vector<std::vector<AffineIds>> heads;   // [component][group]
  std::vector<PartitionSpec> partitions;       // [component]; set before forward
};

struct GateIds {
  AffineIds l1;
  AffineIds l2;
};

// One fusion site: per-input linear projections to the common width at
// this depth, then a left fold of pairwise gated merges (gate count =
// input count - 1).
struct MffModule {
  int layer = 0;
  std::vector<AffineIds> projections;
  std::vector<GateIds> gates;
};

struct CrossModule {
  std::vector<MffModule> mffs;                 // depths K .. L-1
  AffineIds final_layer;                       // depth L, mirrors branch widths
  std::vector<std::vector<AffineIds>> heads;
  std::vector<PartitionSpec> partitions;
};

// Binds store parameters to tape leaves for one forward pass and routes
// gradients back afterwards.
class GraphSession {
 public:
  GraphSession(Tape& tape, const ParameterStore& store) : tape_(tape), store_(store) {}

  int param(int store_index);
  void accumulate_gradients(ParameterStore& store) const;
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  const ParameterStore& store_;
  std::unordered_map<int, int> leaves_;
};

// Tape handles for one NIG output over a batch: four [n] vectors.
struct NigTapeIds {
  int delta = -1;
  int gamma = -1;
  int alpha = -1;
  int beta = -1;
};

// In-graph M-ary mixture fusion, differentiable end to end.
NigTapeIds monig_fuse_graph(Tape& tape, const std::vector<NigTapeIds>& inputs);

struct ComponentTapeIds {
  std::vector<NigTapeIds> heads;  // [group]
  NigTapeIds fused;
};

struct BranchTapeOut {
  std::vector<int> features;                // [depth], values [n, w_l]
  std::vector<ComponentTapeIds> components; // [component]
};

struct CrossTapeOut {
  int final_feature = -1;
  std::vector<ComponentTapeIds> components;
};

// Per-sample evidence bookkeeping captured by a forward pass.
struct ForwardDiagnostics {
  // [component][sample][candidate]; candidates are branches in index
  // order, cross last when enabled. Rows sum to 1.
  std::vector<std::vector<std::vector<double>>> branch_weights;
  // [candidate][component][sample][group]; rows sum to 1.
  std::vector<std::vector<std::vector<std::vector<double>>>> regressor_weights;
  // [candidate][component][sample]
  std::vector<std::vector<std::vector<NIGParams>>> branch_fused;
};

struct EifForwardResult {
  std::vector<std::vector<NIGParams>> fused;            // [component][sample]
  std::vector<std::vector<UncertaintyReport>> report;   // [component][sample]
  ForwardDiagnostics diag;
};

struct BranchForwardResult {
  std::vector<std::vector<std::vector<NIGParams>>> heads;  // [component][group][sample]
  std::vector<std::vector<NIGParams>> fused;               // [component][sample]
};

// Multi-branch evidential regressor: one branch per source dataset plus a
// cross branch fed by mid-level branch features. Construction creates all
// parameters (zero-valued); init_params fills them deterministically.
class EIFModel {
 public:
  EIFModel(NetworkConfig cfg, std::vector<std::string> dataset_ids);

  void init_params(std::uint64_t seed);

  const NetworkConfig& config() const { return cfg_; }
  int branch_count() const { return static_cast<int>(branches_.size()); }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const BranchModule& branch(int i) const { return branches_[static_cast<std::size_t>(i)]; }
  const CrossModule& cross() const { return cross_; }

  // Cross branch participation in forward/eval; flips for the ablation row.
  bool cross_enabled() const { return cross_enabled_; }
  void set_cross_enabled(bool on) { cross_enabled_ = on; }

  void set_branch_partitions(int branch, std::vector<PartitionSpec> parts);
  void set_cross_partitions(std::vector<PartitionSpec> parts);
  bool cross_partitions_set() const { return cross_partitions_set_; }

  std::vector<int> branch_param_indices(int branch) const;
  std::vector<int> cross_param_indices() const;
  std::vector<int> all_param_indices() const;

  // Graph builders; x_id must hold [n, input_dim].
  BranchTapeOut branch_graph(Tape& tape, GraphSession& session, int branch, int x_id) const;
  CrossTapeOut cross_graph(Tape& tape, GraphSession& session,
                           const std::vector<BranchTapeOut>& branch_outs) const;
  int mff_graph(Tape& tape, GraphSession& session, const MffModule& mff,
                const std::vector<int>& branch_features, int previous_cross) const;

  // Inter fusion across candidates; a single candidate passes through
  // unchanged (no M=1 evidence shift at this site).
  std::vector<NigTapeIds> inter_fuse_graph(
      Tape& tape, const std::vector<std::vector<NigTapeIds>>& candidates) const;

  // Value-level forward passes.
  BranchForwardResult branch_forward(int branch, const Tensor& x) const;
  EifForwardResult forward(const Tensor& x, bool collect_diagnostics = false) const;

  // Unweighted mean of the single-dataset branches' fused deltas; the
  // cross branch never participates (it does not exist after stage 1).
  std::vector<std::vector<double>> average_fusion_predict(const Tensor& x) const;

 private:
  void build_branch(int index, const std::string& dataset_id);
  void build_cross();
  AffineIds add_affine(const std::string& name, std::size_t in, std::size_t out,
                       double init_scale_mult);
  ComponentTapeIds component_graph(Tape& tape, GraphSession& session,
                                   const std::vector<AffineIds>& heads,
                                   const PartitionSpec& partition, int feature) const;

  NetworkConfig cfg_;
  ParameterStore store_;
  std::vector<double> init_half_width_;  // parallel to store_, 0 for biases
  std::vector<BranchModule> branches_;
  CrossModule cross_;
  bool cross_enabled_ = true;
  bool cross_partitions_set_ = false;
};

// Plain regression net sharing the branch feature architecture with one
// linear output per component; trained with L1 loss as a baseline.
class BaselineModel {
 public:
  explicit BaselineModel(NetworkConfig cfg);

  void init_params(std::uint64_t seed);

  const NetworkConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

  struct TapeOut {
    int feature = -1;
    std::vector<int> outputs;  // [component], values [n]
  };
  TapeOut graph(Tape& tape, GraphSession& session, int x_id) const;

  std::vector<std::vector<double>> predict(const Tensor& x) const;  // [component][sample]

 private:
  NetworkConfig cfg_;
  ParameterStore store_;
  std::vector<double> init_half_width_;
  std::vector<AffineIds> layers_;
  std::vector<AffineIds> heads_;
};

}  // namespace evifuse
