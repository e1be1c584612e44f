#include "evifuse/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "evifuse/errors.hpp"

namespace evifuse {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;

void require_compatible(const std::vector<const Dataset*>& sets) {
  if (sets.empty()) throw PreconditionError("sampling needs at least one dataset");
  for (const Dataset* ds : sets) {
    if (ds == nullptr || ds->size() == 0) {
      throw PreconditionError("sampling needs non-empty datasets");
    }
    if (ds->input_dim() != sets[0]->input_dim() || ds->components() != sets[0]->components()) {
      throw PreconditionError("datasets disagree on input or label width");
    }
  }
}

std::vector<const Dataset*> pointers(const std::vector<Dataset>& data) {
  std::vector<const Dataset*> out;
  out.reserve(data.size());
  for (const Dataset& ds : data) out.push_back(&ds);
  return out;
}

double node_value(const Tape& tape, int id) {
  return id < 0 ? 0.0 : tape.value(id).values[0];
}

// total := total + term, tolerating the initial empty state.
int add_term(Tape& tape, int total, int term) {
  if (term < 0) return total;
  return total < 0 ? term : tape.add(total, term);
}

void check_batch_finite(double total, const char* stage, int batch) {
  if (std::isfinite(total)) return;
  char msg[96];
  std::snprintf(msg, sizeof(msg), "%s loss is not finite at batch %d", stage, batch);
  throw NumericRangeError(msg);
}

std::vector<std::vector<double>> group_masks(const PartitionSpec& part,
                                             const std::vector<double>& y) {
  std::vector<std::vector<double>> masks(
      static_cast<std::size_t>(part.group_count), std::vector<double>(y.size(), 0.0));
  for (std::size_t i = 0; i < y.size(); ++i) {
    for (int g : group_membership(part, y[i])) {
      masks[static_cast<std::size_t>(g)][i] = 1.0;
    }
  }
  return masks;
}

// Local (per-group masked) plus fused losses for one set of component
// outputs against one partition set; shared by the stage-1 and cross terms.
int partitioned_loss(Tape& tape, const std::vector<ComponentTapeIds>& components,
                     const std::vector<PartitionSpec>& partitions, const BatchData& batch,
                     double lambda, std::vector<std::vector<int>>* local_ids,
                     std::vector<int>* global_ids) {
  const std::size_t comps = components.size();
  if (partitions.size() != comps) {
    throw PreconditionError("partition count does not match output components");
  }
  int total = -1;
  for (std::size_t d = 0; d < comps; ++d) {
    const std::vector<double>& y = batch.y[d];
    const std::vector<std::vector<double>> masks = group_masks(partitions[d], y);
    std::vector<int> locals(masks.size(), -1);
    for (std::size_t g = 0; g < masks.size(); ++g) {
      locals[g] = evidential_loss_graph(tape, components[d].heads[g], y, lambda, &masks[g]);
      total = add_term(tape, total, locals[g]);
    }
    const int fused = evidential_loss_graph(tape, components[d].fused, y, lambda, nullptr);
    total = add_term(tape, total, fused);
    if (local_ids != nullptr) (*local_ids)[d] = std::move(locals);
    if (global_ids != nullptr) (*global_ids)[d] = fused;
  }
  return total;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lambda > 0.0)) throw ConfigError("training.lambda must be > 0");
  if (!(learning_rate > 0.0)) throw ConfigError("training.learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("training.batch_size must be >= 1");
  if (stage1_batches < 0) throw ConfigError("training.stage1_batches must be >= 0");
  if (stage2_batches < 0) throw ConfigError("training.stage2_batches must be >= 0");
}

std::vector<SampleRef> balanced_batch(const std::vector<const Dataset*>& sets, int batch_size,
                                      Rng& rng) {
  require_compatible(sets);
  if (batch_size < 1) throw PreconditionError("batch_size must be >= 1");
  if (static_cast<std::size_t>(batch_size) < sets.size()) {
    throw PreconditionError("batch_size must be at least the dataset count");
  }
  std::vector<SampleRef> refs(static_cast<std::size_t>(batch_size));
  for (SampleRef& ref : refs) {
    ref.dataset = static_cast<int>(rng.below(sets.size()));
    ref.row = rng.below(sets[static_cast<std::size_t>(ref.dataset)]->size());
  }
  return refs;
}

BatchData assemble_batch(const std::vector<const Dataset*>& sets,
                         const std::vector<SampleRef>& refs) {
  require_compatible(sets);
  const std::size_t n = refs.size();
  const std::size_t dim = static_cast<std::size_t>(sets[0]->input_dim());
  const std::size_t comps = static_cast<std::size_t>(sets[0]->components());
  BatchData batch;
  batch.x = Tensor::zeros({n, dim});
  batch.y.assign(comps, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    const SampleRef& ref = refs[i];
    if (ref.dataset < 0 || static_cast<std::size_t>(ref.dataset) >= sets.size()) {
      throw PreconditionError("sample reference names a missing dataset");
    }
    const Dataset& ds = *sets[static_cast<std::size_t>(ref.dataset)];
    if (ref.row >= ds.size()) throw PreconditionError("sample reference row out of range");
    for (std::size_t j = 0; j < dim; ++j) batch.x.at(i, j) = ds.inputs[ref.row][j];
    for (std::size_t d = 0; d < comps; ++d) batch.y[d][i] = ds.labels[ref.row][d];
  }
  return batch;
}

int evidential_loss_graph(Tape& tape, const NigTapeIds& nig, const std::vector<double>& y,
                          double lambda, const std::vector<double>* mask) {
  if (!(lambda > 0.0)) throw PreconditionError("lambda must be > 0");
  if (y.empty()) throw PreconditionError("loss needs at least one label");
  const std::size_t n = y.size();
  double selected = static_cast<double>(n);
  if (mask != nullptr) {
    if (mask->size() != n) throw PreconditionError("mask length does not match labels");
    selected = 0.0;
    for (double m : *mask) selected += m;
    if (selected == 0.0) return -1;
  }

  const int y_id = tape.constant(Tensor::vector(y));
  const int resid = tape.sub(y_id, nig.delta);
  const int omega = tape.mul_scalar(tape.mul(nig.beta, tape.add_scalar(nig.gamma, 1.0)), 2.0);
  const int spread = tape.add_scalar(tape.mul_scalar(tape.log(nig.gamma), -0.5),
                                     0.5 * std::log(kPi));
  const int evidence = tape.mul_scalar(tape.mul(nig.alpha, tape.log(omega)), -1.0);
  const int fit_arg = tape.add(tape.mul(tape.square(resid), nig.gamma), omega);
  const int fit = tape.mul(tape.add_scalar(nig.alpha, 0.5), tape.log(fit_arg));
  const int norm = tape.sub(tape.log_gamma(nig.alpha),
                            tape.log_gamma(tape.add_scalar(nig.alpha, 0.5)));
  const int nll = tape.add(tape.add(spread, evidence), tape.add(fit, norm));
  const int reg = tape.mul(tape.abs(resid), tape.add(tape.mul_scalar(nig.gamma, 2.0), nig.alpha));
  const int per_sample = tape.add(nll, tape.mul_scalar(reg, lambda));
  if (mask == nullptr) return tape.mean(per_sample);
  const int masked = tape.mul(per_sample, tape.constant(Tensor::vector(*mask)));
  return tape.mul_scalar(tape.mean(masked), static_cast<double>(n) / selected);
}

double Stage1LossIds::local_value() const {
  double sum = 0.0;
  for (const std::vector<int>& per_group : local) {
    for (int id : per_group) sum += node_value(*tape, id);
  }
  return sum;
}

double Stage1LossIds::global_value() const {
  double sum = 0.0;
  for (int id : global_term) sum += node_value(*tape, id);
  return sum;
}

Stage1LossIds stage1_loss_graph(const EIFModel& model, Tape& tape, GraphSession& session,
                                int branch, const BatchData& batch, double lambda) {
  const int x_id = tape.constant(batch.x);
  const BranchTapeOut out = model.branch_graph(tape, session, branch, x_id);
  Stage1LossIds ids;
  ids.tape = &tape;
  ids.local.resize(out.components.size());
  ids.global_term.assign(out.components.size(), -1);
  ids.total = partitioned_loss(tape, out.components, model.branch(branch).partitions, batch,
                               lambda, &ids.local, &ids.global_term);
  if (ids.total < 0) throw PreconditionError("stage 1 loss is empty");
  return ids;
}

Stage2LossIds stage2_loss_graph(const EIFModel& model, Tape& tape, GraphSession& session,
                                const BatchData& batch, double lambda) {
  const int x_id = tape.constant(batch.x);
  const std::size_t comps = static_cast<std::size_t>(model.config().output_components);
  std::vector<BranchTapeOut> branch_outs;
  branch_outs.reserve(static_cast<std::size_t>(model.branch_count()));
  for (int b = 0; b < model.branch_count(); ++b) {
    branch_outs.push_back(model.branch_graph(tape, session, b, x_id));
  }
  std::vector<std::vector<NigTapeIds>> candidates(comps);
  for (const BranchTapeOut& out : branch_outs) {
    for (std::size_t d = 0; d < comps; ++d) candidates[d].push_back(out.components[d].fused);
  }

  Stage2LossIds ids;
  int total = -1;
  if (model.cross_enabled()) {
    const CrossTapeOut cross = model.cross_graph(tape, session, branch_outs);
    ids.cross_term = partitioned_loss(tape, cross.components, model.cross().partitions, batch,
                                      lambda, nullptr, nullptr);
    total = add_term(tape, total, ids.cross_term);
    for (std::size_t d = 0; d < comps; ++d) candidates[d].push_back(cross.components[d].fused);
  }

  const std::vector<NigTapeIds> fused = model.inter_fuse_graph(tape, candidates);
  int joint = -1;
  for (std::size_t d = 0; d < comps; ++d) {
    joint = add_term(tape, joint,
                     evidential_loss_graph(tape, fused[d], batch.y[d], lambda, nullptr));
  }
  ids.joint_term = joint;
  ids.total = add_term(tape, total, joint);
  return ids;
}

int adapt_loss_graph(const EIFModel& model, Tape& tape, GraphSession& session,
                     const BatchData& batch, double lambda) {
  const int x_id = tape.constant(batch.x);
  const std::size_t comps = static_cast<std::size_t>(model.config().output_components);
  std::vector<BranchTapeOut> branch_outs;
  branch_outs.reserve(static_cast<std::size_t>(model.branch_count()));
  for (int b = 0; b < model.branch_count(); ++b) {
    branch_outs.push_back(model.branch_graph(tape, session, b, x_id));
  }
  std::vector<std::vector<NigTapeIds>> candidates(comps);
  int total = -1;
  for (const BranchTapeOut& out : branch_outs) {
    for (std::size_t d = 0; d < comps; ++d) {
      candidates[d].push_back(out.components[d].fused);
      total = add_term(tape, total, evidential_loss_graph(tape, out.components[d].fused,
                                                          batch.y[d], lambda, nullptr));
    }
  }
  if (model.cross_enabled()) {
    const CrossTapeOut cross = model.cross_graph(tape, session, branch_outs);
    for (std::size_t d = 0; d < comps; ++d) {
      candidates[d].push_back(cross.components[d].fused);
      total = add_term(tape, total, evidential_loss_graph(tape, cross.components[d].fused,
                                                          batch.y[d], lambda, nullptr));
    }
  }
  const std::vector<NigTapeIds> fused = model.inter_fuse_graph(tape, candidates);
  for (std::size_t d = 0; d < comps; ++d) {
    total = add_term(tape, total,
                     evidential_loss_graph(tape, fused[d], batch.y[d], lambda, nullptr));
  }
  return total;
}

std::vector<TraceRow> train_stage1(EIFModel& model, int branch, const Dataset& data,
                                   const TrainConfig& cfg) {
  cfg.validate();
  if (branch < 0 || branch >= model.branch_count()) {
    throw PreconditionError("branch index out of range");
  }
  if (data.size() == 0) throw PreconditionError("stage 1 needs a non-empty dataset");
  if (data.components() != model.config().output_components ||
      data.input_dim() != model.config().input_dim) {
    throw PreconditionError("dataset width does not match the network");
  }

  const std::vector<const Dataset*> sets{&data};
  AdamOptimizer opt(model.params(), AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8},
                    model.branch_param_indices(branch));
  Rng rng(derive_seed(cfg.seed, "stage1/branch" + std::to_string(branch)));

  const std::vector<PartitionSpec>& parts = model.branch(branch).partitions;
  std::vector<std::vector<long>> hits(parts.size());
  for (std::size_t d = 0; d < parts.size(); ++d) {
    hits[d].assign(static_cast<std::size_t>(parts[d].group_count), 0);
  }

  Tape tape;
  std::vector<TraceRow> trace;
  trace.reserve(static_cast<std::size_t>(cfg.stage1_batches));
  for (int b = 0; b < cfg.stage1_batches; ++b) {
    std::vector<SampleRef> refs(static_cast<std::size_t>(cfg.batch_size));
    for (SampleRef& ref : refs) ref = SampleRef{0, rng.below(data.size())};
    const BatchData batch = assemble_batch(sets, refs);
    for (std::size_t d = 0; d < parts.size(); ++d) {
      for (double y : batch.y[d]) {
        for (int g : group_membership(parts[d], y)) hits[d][static_cast<std::size_t>(g)]++;
      }
    }

    tape.reset();
    GraphSession session(tape, model.params());
    const Stage1LossIds ids = stage1_loss_graph(model, tape, session, branch, batch, cfg.lambda);
    const double total = node_value(tape, ids.total);
    check_batch_finite(total, "stage 1", b);
    tape.backward(ids.total);
    trace.push_back(TraceRow{b, total, ids.local_value(), ids.global_value()});
    session.accumulate_gradients(model.params());
    if (cfg.clip_norm > 0.0) model.params().clip_grads(cfg.clip_norm);
    opt.step(model.params());
  }

  for (std::size_t d = 0; d < hits.size(); ++d) {
    for (std::size_t g = 0; g < hits[d].size(); ++g) {
      if (hits[d][g] == 0 && cfg.stage1_batches > 0) {
        std::fprintf(stderr,
                     "warning: branch %d component %zu group %zu drew no samples across %d "
                     "stage-1 batches\n",
                     branch, d, g, cfg.stage1_batches);
      }
    }
  }
  return trace;
}

std::vector<TraceRow> train_stage2(EIFModel& model, const std::vector<Dataset>& stage2_sets,
                                   const TrainConfig& cfg) {
  cfg.validate();
  if (static_cast<int>(stage2_sets.size()) != model.branch_count()) {
    throw PreconditionError("stage 2 expects one dataset per branch");
  }
  const std::vector<const Dataset*> sets = pointers(stage2_sets);
  require_compatible(sets);

  const std::vector<int> trainable = cfg.freeze_backbones_stage2 ? model.cross_param_indices()
                                                                 : model.all_param_indices();
  AdamOptimizer opt(model.params(), AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8}, trainable);
  Rng rng(derive_seed(cfg.seed, "stage2"));

  Tape tape;
  std::vector<TraceRow> trace;
  trace.reserve(static_cast<std::size_t>(cfg.stage2_batches));
  for (int b = 0; b < cfg.stage2_batches; ++b) {
    const std::vector<SampleRef> refs = balanced_batch(sets, cfg.batch_size, rng);
    const BatchData batch = assemble_batch(sets, refs);
    tape.reset();
    GraphSession session(tape, model.params());
    const Stage2LossIds ids = stage2_loss_graph(model, tape, session, batch, cfg.lambda);
    const double total = node_value(tape, ids.total);
    check_batch_finite(total, "stage 2", b);
    tape.backward(ids.total);
    trace.push_back(TraceRow{b, total, node_value(tape, ids.cross_term),
                             node_value(tape, ids.joint_term)});
    session.accumulate_gradients(model.params());
    if (cfg.clip_norm > 0.0) model.params().clip_grads(cfg.clip_norm);
    opt.step(model.params());
  }
  return trace;
}

std::vector<TraceRow> finetune_adapt(EIFModel& model, const Dataset& pool,
                                     const TrainConfig& cfg, int batches) {
  cfg.validate();
  if (batches < 0) throw PreconditionError("adaptation batch count must be >= 0");
  if (pool.size() == 0) throw PreconditionError("adaptation needs a non-empty dataset");
  if (pool.components() != model.config().output_components ||
      pool.input_dim() != model.config().input_dim) {
    throw PreconditionError("dataset width does not match the network");
  }

  const std::vector<const Dataset*> sets{&pool};
  AdamOptimizer opt(model.params(), AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8},
                    model.all_param_indices());
  Rng rng(derive_seed(cfg.seed, "adapt"));

  Tape tape;
  std::vector<TraceRow> trace;
  trace.reserve(static_cast<std::size_t>(batches));
  for (int b = 0; b < batches; ++b) {
    std::vector<SampleRef> refs(static_cast<std::size_t>(cfg.batch_size));
    for (SampleRef& ref : refs) ref = SampleRef{0, rng.below(pool.size())};
    const BatchData batch = assemble_batch(sets, refs);
    tape.reset();
    GraphSession session(tape, model.params());
    const int loss = adapt_loss_graph(model, tape, session, batch, cfg.lambda);
    const double total = node_value(tape, loss);
    check_batch_finite(total, "adaptation", b);
    tape.backward(loss);
    trace.push_back(TraceRow{b, total, 0.0, 0.0});
    session.accumulate_gradients(model.params());
    if (cfg.clip_norm > 0.0) model.params().clip_grads(cfg.clip_norm);
    opt.step(model.params());
  }
  return trace;
}

BaselineModel train_baseline(BaselineVariant variant, const std::vector<Dataset>& data,
                             const NetworkConfig& net, const TrainConfig& cfg,
                             std::uint64_t init_seed, std::vector<TraceRow>* trace) {
  cfg.validate();
  net.validate();
  if (variant == BaselineVariant::kSingle && data.size() != 1) {
    throw PreconditionError("the single-source baseline takes exactly one dataset");
  }
  const std::vector<const Dataset*> sets = pointers(data);
  require_compatible(sets);
  if (sets[0]->components() != net.output_components || sets[0]->input_dim() != net.input_dim) {
    throw PreconditionError("dataset width does not match the network");
  }

  BaselineModel model(net);
  model.init_params(init_seed);
  AdamOptimizer opt(model.params(), AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8});
  Rng rng(derive_seed(cfg.seed, "baseline"));

  // Pooled sampling weights every row equally regardless of dataset size.
  std::vector<std::size_t> cumulative;
  std::size_t total_rows = 0;
  for (const Dataset* ds : sets) {
    total_rows += ds->size();
    cumulative.push_back(total_rows);
  }

  Tape tape;
  if (trace != nullptr) trace->reserve(static_cast<std::size_t>(cfg.stage1_batches));
  for (int b = 0; b < cfg.stage1_batches; ++b) {
    std::vector<SampleRef> refs;
    if (variant == BaselineVariant::kBalancedMix) {
      refs = balanced_batch(sets, cfg.batch_size, rng);
    } else {
      refs.resize(static_cast<std::size_t>(cfg.batch_size));
      for (SampleRef& ref : refs) {
        const std::size_t flat = rng.below(total_rows);
        const std::size_t which = static_cast<std::size_t>(
            std::upper_bound(cumulative.begin(), cumulative.end(), flat) - cumulative.begin());
        const std::size_t base = which == 0 ? 0 : cumulative[which - 1];
        ref = SampleRef{static_cast<int>(which), flat - base};
      }
    }
    const BatchData batch = assemble_batch(sets, refs);
    tape.reset();
    GraphSession session(tape, model.params());
    const int x_id = tape.constant(batch.x);
    const BaselineModel::TapeOut out = model.graph(tape, session, x_id);
    int loss = -1;
    for (std::size_t d = 0; d < batch.y.size(); ++d) {
      const int y_id = tape.constant(Tensor::vector(batch.y[d]));
      loss = add_term(tape, loss, tape.mean(tape.abs(tape.sub(y_id, out.outputs[d]))));
    }
    const double total = node_value(tape, loss);
    check_batch_finite(total, "baseline", b);
    tape.backward(loss);
    if (trace != nullptr) trace->push_back(TraceRow{b, total, 0.0, 0.0});
    session.accumulate_gradients(model.params());
    if (cfg.clip_norm > 0.0) model.params().clip_grads(cfg.clip_norm);
    opt.step(model.params());
  }
  return model;
}

namespace {

constexpr std::size_t kEvalChunk = 256;

void require_evaluable(const Dataset& data, const NetworkConfig& net) {
  if (data.size() == 0) throw PreconditionError("evaluation needs a non-empty dataset");
  if (data.components() != net.output_components || data.input_dim() != net.input_dim) {
    throw PreconditionError("dataset width does not match the network");
  }
}

std::vector<std::size_t> chunk_rows(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> rows(end - begin);
  for (std::size_t i = begin; i < end; ++i) rows[i - begin] = i;
  return rows;
}

Metrics finalize_errors(const Dataset& data,
                        const std::vector<std::vector<double>>& predictions) {
  const std::size_t n = data.size();
  const std::size_t comps = predictions.size();
  Metrics m;
  m.mae.assign(comps, 0.0);
  m.samples = n;
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t d = 0; d < comps; ++d) {
      const double err = predictions[d][i] - data.labels[i][d];
      m.mae[d] += std::abs(err);
      sq += err * err;
    }
    m.euclidean += std::sqrt(sq);
  }
  for (double& v : m.mae) v /= static_cast<double>(n);
  m.euclidean /= static_cast<double>(n);
  return m;
}

}  // namespace

Metrics evaluate(const EIFModel& model, const Dataset& data) {
  require_evaluable(data, model.config());
  const std::size_t n = data.size();
  const std::size_t comps = static_cast<std::size_t>(model.config().output_components);
  std::vector<std::vector<double>> predictions(comps, std::vector<double>(n, 0.0));
  double alea = 0.0;
  double epi = 0.0;
  for (std::size_t begin = 0; begin < n; begin += kEvalChunk) {
    const std::size_t end = std::min(n, begin + kEvalChunk);
    const std::vector<std::size_t> rows = chunk_rows(begin, end);
    const EifForwardResult out = model.forward(input_tensor(data, rows));
    for (std::size_t d = 0; d < comps; ++d) {
      for (std::size_t i = 0; i < rows.size(); ++i) {
        predictions[d][begin + i] = out.report[d][i].prediction;
        alea += out.report[d][i].aleatoric;
        epi += out.report[d][i].epistemic;
      }
    }
  }
  Metrics m = finalize_errors(data, predictions);
  m.mean_aleatoric = alea / static_cast<double>(n * comps);
  m.mean_epistemic = epi / static_cast<double>(n * comps);
  return m;
}

Metrics evaluate_average_fusion(const EIFModel& model, const Dataset& data) {
  require_evaluable(data, model.config());
  const std::size_t n = data.size();
  const std::size_t comps = static_cast<std::size_t>(model.config().output_components);
  std::vector<std::vector<double>> predictions(comps, std::vector<double>(n, 0.0));
  for (std::size_t begin = 0; begin < n; begin += kEvalChunk) {
    const std::size_t end = std::min(n, begin + kEvalChunk);
    const std::vector<std::size_t> rows = chunk_rows(begin, end);
    const std::vector<std::vector<double>> out =
        model.average_fusion_predict(input_tensor(data, rows));
    for (std::size_t d = 0; d < comps; ++d) {
      for (std::size_t i = 0; i < rows.size(); ++i) predictions[d][begin + i] = out[d][i];
    }
  }
  // Plain averaging carries no calibrated variance, so the uncertainty
  // fields stay zero.
  return finalize_errors(data, predictions);
}

Metrics evaluate_cross_only(const EIFModel& model, const Dataset& data) {
  require_evaluable(data, model.config());
  if (!model.cross_enabled()) {
    throw PreconditionError("cross-only evaluation needs the cross branch enabled");
  }
  const std::size_t n = data.size();
  const std::size_t comps = static_cast<std::size_t>(model.config().output_components);
  std::vector<std::vector<double>> predictions(comps, std::vector<double>(n, 0.0));
  double alea = 0.0;
  double epi = 0.0;
  for (std::size_t begin = 0; begin < n; begin += kEvalChunk) {
    const std::size_t end = std::min(n, begin + kEvalChunk);
    const std::vector<std::size_t> rows = chunk_rows(begin, end);
    const EifForwardResult out = model.forward(input_tensor(data, rows), true);
    // The cross branch is the last fusion candidate.
    const auto& cross = out.diag.branch_fused.back();
    for (std::size_t d = 0; d < comps; ++d) {
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const UncertaintyReport rep = uncertainty(cross[d][i]);
        predictions[d][begin + i] = rep.prediction;
        alea += rep.aleatoric;
        epi += rep.epistemic;
      }
    }
  }
  Metrics m = finalize_errors(data, predictions);
  m.mean_aleatoric = alea / static_cast<double>(n * comps);
  m.mean_epistemic = epi / static_cast<double>(n * comps);
  return m;
}

Metrics evaluate(const BaselineModel& model, const Dataset& data) {
  require_evaluable(data, model.config());
  const std::size_t n = data.size();
  const std::size_t comps = static_cast<std::size_t>(model.config().output_components);
  std::vector<std::vector<double>> predictions(comps, std::vector<double>(n, 0.0));
  for (std::size_t begin = 0; begin < n; begin += kEvalChunk) {
    const std::size_t end = std::min(n, begin + kEvalChunk);
    const std::vector<std::size_t> rows = chunk_rows(begin, end);
    const std::vector<std::vector<double>> out = model.predict(input_tensor(data, rows));
    for (std::size_t d = 0; d < comps; ++d) {
      for (std::size_t i = 0; i < rows.size(); ++i) predictions[d][begin + i] = out[d][i];
    }
  }
  return finalize_errors(data, predictions);
}

}  // namespace evifuse
