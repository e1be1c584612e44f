#pragma once

#include <cstdint>
#include <vector>

#include "evifuse/model.hpp"
#include "evifuse/rng.hpp"
#include "evifuse/synth_data.hpp"

namespace evifuse {

struct TrainConfig {
  double lambda = 0.01;
  double learning_rate = 1e-4;
  int batch_size = 64;
  int stage1_batches = 4000;
  int stage2_batches = 500;
  std::uint64_t seed = 1;
  // Stage 2 normally keeps every parameter trainable; freezing restricts
  // updates to the cross branch (branch parameters stay bit-identical).
  bool freeze_backbones_stage2 = false;
  // Global gradient norm cap; values <= 0 disable clipping.
  double clip_norm = 10.0;

  void validate() const;
};

struct TraceRow {
  int batch = 0;
  double total = 0.0;
  // Stage 1: summed per-group local losses / fused-output loss.
  // Stage 2: cross-branch loss / jointly fused loss.
  double first_term = 0.0;
  double second_term = 0.0;
};

struct BatchData {
  Tensor x;                            // [n, input_dim]
  std::vector<std::vector<double>> y;  // [component][n]
  std::size_t size() const { return x.rows(); }
};

struct SampleRef {
  int dataset = 0;
  std::size_t row = 0;
};

// Dataset chosen uniformly, then a row uniformly with replacement; small
// datasets are oversampled to an equal share of draws.
std::vector<SampleRef> balanced_batch(const std::vector<const Dataset*>& sets, int batch_size,
                                      Rng& rng);

BatchData assemble_batch(const std::vector<const Dataset*>& sets,
                         const std::vector<SampleRef>& refs);

// Mean evidential loss of one NIG output against labels y, restricted to
// mask entries of 1 when mask is given. Returns -1 for an all-zero mask
// (no contribution). The mean runs over the selected samples.
int evidential_loss_graph(Tape& tape, const NigTapeIds& nig, const std::vector<double>& y,
                          double lambda, const std::vector<double>* mask);

struct Stage1LossIds {
  int total = -1;
  std::vector<std::vector<int>> local;  // [component][group], -1 when empty in batch
  std::vector<int> global_term;         // [component]
  double local_value() const;
  double global_value() const;
  const Tape* tape = nullptr;
};

// Per-group local losses (each over its own members only) plus the loss of
// the branch's fused output, summed across components.
Stage1LossIds stage1_loss_graph(const EIFModel& model, Tape& tape, GraphSession& session,
                                int branch, const BatchData& batch, double lambda);

struct Stage2LossIds {
  int total = -1;
  int cross_term = -1;  // -1 when the cross branch is disabled
  int joint_term = -1;
};

// Cross-branch loss (same shape as stage 1, against the cross partitions)
// plus the loss of the jointly fused output. With the cross branch
// disabled only the joint term remains.
Stage2LossIds stage2_loss_graph(const EIFModel& model, Tape& tape, GraphSession& session,
                                const BatchData& batch, double lambda);

// Evidence loss on every branch's fused output, the cross output when
// enabled, and the final fused output; used for target adaptation.
int adapt_loss_graph(const EIFModel& model, Tape& tape, GraphSession& session,
                     const BatchData& batch, double lambda);

// Trains one branch on its source dataset. Only that branch's parameters
// move. Batches are uniform draws with replacement.
std::vector<TraceRow> train_stage1(EIFModel& model, int branch, const Dataset& data,
                                   const TrainConfig& cfg);

// Joint training on balanced batches from the stage-2 splits.
std::vector<TraceRow> train_stage2(EIFModel& model, const std::vector<Dataset>& stage2_sets,
                                   const TrainConfig& cfg);

std::vector<TraceRow> finetune_adapt(EIFModel& model, const Dataset& pool,
                                     const TrainConfig& cfg, int batches);

enum class BaselineVariant { kSingle, kSimpleMix, kBalancedMix };

// L1-trained plain regressor. kSingle expects exactly one dataset;
// kSimpleMix samples uniformly over the pooled rows; kBalancedMix uses
// balanced_batch.
BaselineModel train_baseline(BaselineVariant variant, const std::vector<Dataset>& data,
                             const NetworkConfig& net, const TrainConfig& cfg,
                             std::uint64_t init_seed, std::vector<TraceRow>* trace);

struct Metrics {
  std::vector<double> mae;  // per component
  double euclidean = 0.0;   // mean over samples of the l2 error across components
  double mean_aleatoric = 0.0;
  double mean_epistemic = 0.0;
  std::size_t samples = 0;
};

Metrics evaluate(const EIFModel& model, const Dataset& data);
Metrics evaluate_average_fusion(const EIFModel& model, const Dataset& data);
// Scores the cross branch's own fused output, skipping inter fusion; the
// cross branch must be enabled.
Metrics evaluate_cross_only(const EIFModel& model, const Dataset& data);
Metrics evaluate(const BaselineModel& model, const Dataset& data);

}  // namespace evifuse
