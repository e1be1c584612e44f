#include "evifuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "evifuse/errors.hpp"
#include "evifuse/model.hpp"
#include "evifuse/partition.hpp"
#include "evifuse/rng.hpp"
#include "evifuse/tape.hpp"
#include "evifuse/training.hpp"

namespace evifuse {

namespace {

double rel_error(double analytic, double fd) {
  const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-3});
  return std::abs(analytic - fd) / denom;
}

}  // namespace

double finite_difference_error(const std::function<int(Tape&, const std::vector<int>&)>& build,
                               const std::vector<Tensor>& inputs, double h_scale) {
  Tape tape;
  std::vector<int> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  const int root = build(tape, leaves);
  tape.backward(root);
  std::vector<Tensor> analytic;
  analytic.reserve(inputs.size());
  for (int leaf : leaves) analytic.push_back(tape.gradient(leaf));

  std::vector<Tensor> work = inputs;
  const auto eval = [&](void) {
    Tape fresh;
    std::vector<int> ids;
    ids.reserve(work.size());
    for (const Tensor& t : work) ids.push_back(fresh.leaf(t));
    return fresh.value(build(fresh, ids)).values[0];
  };

  double worst = 0.0;
  for (std::size_t p = 0; p < work.size(); ++p) {
    for (std::size_t k = 0; k < work[p].values.size(); ++k) {
      const double orig = work[p].values[k];
      const double h = h_scale * std::max(1.0, std::abs(orig));
      work[p].values[k] = orig + h;
      const double up = eval();
      work[p].values[k] = orig - h;
      const double down = eval();
      work[p].values[k] = orig;
      const double fd = (up - down) / (2.0 * h);
      worst = std::max(worst, rel_error(analytic[p].values[k], fd));
    }
  }
  return worst;
}

namespace {

enum class LossKind { kStage1, kStage2, kAdapt, kBaseline };

struct CaseSpec {
  const char* name;
  LossKind kind;
  int branches;
  std::vector<int> widths;
  int mff_start;
  int groups;
  double overlap;
  int components;
  int input_dim;
  int batch;
  bool cross_on;
  int branch;  // stage-1 target
};

// Labels are compared against these deltas inside |y - delta| terms; keep
// every label at least `margin` away so central differences never step
// across the kink.
void nudge_labels(std::vector<double>& y, const std::vector<std::vector<double>>& deltas,
                  std::size_t sample, double margin) {
  double& label = y[sample];
  for (int pass = 0; pass < 64; ++pass) {
    double nearest = 0.0;
    double gap = margin;
    bool hit = false;
    for (const std::vector<double>& vec : deltas) {
      const double d = vec[sample];
      if (std::abs(label - d) < gap) {
        gap = std::abs(label - d);
        nearest = d;
        hit = true;
      }
    }
    if (!hit) return;
    const double dir = label >= nearest ? 1.0 : -1.0;
    label = nearest + dir * (margin + 1e-3 * (pass + 1));
  }
}

struct CaseContext {
  NetworkConfig net;
  BatchData batch;
  double lambda = 0.01;
};

std::vector<double> random_labels(Rng& rng, std::size_t n, double span) {
  std::vector<double> out(n);
  for (double& v : out) v = rng.uniform(-span, span);
  return out;
}

std::vector<PartitionSpec> random_partitions(Rng& rng, int components, int groups,
                                             double overlap) {
  std::vector<PartitionSpec> parts;
  parts.reserve(static_cast<std::size_t>(components));
  for (int d = 0; d < components; ++d) {
    parts.push_back(build_partition(random_labels(rng, 60, 1.4), groups, overlap));
  }
  return parts;
}

CaseContext make_context(const CaseSpec& spec, Rng& rng) {
  CaseContext ctx;
  ctx.net.input_dim = spec.input_dim;
  ctx.net.feature_layer_sizes = spec.widths;
  ctx.net.mff_start_layer = spec.mff_start;
  ctx.net.group_count = spec.groups;
  ctx.net.overlap = spec.overlap;
  ctx.net.output_components = spec.components;
  ctx.net.validate();

  const std::size_t n = static_cast<std::size_t>(spec.batch);
  const std::size_t dim = static_cast<std::size_t>(spec.input_dim);
  ctx.batch.x = Tensor::zeros({n, dim});
  for (double& v : ctx.batch.x.values) v = rng.normal();
  ctx.batch.y.assign(static_cast<std::size_t>(spec.components), std::vector<double>(n));
  for (auto& comp : ctx.batch.y) {
    for (double& v : comp) v = rng.uniform(-1.2, 1.2);
  }
  return ctx;
}

// Deltas each label is compared against, per component: local heads and the
// branch-fused output for stage 1, cross heads plus cross and joint fused
// outputs for stage 2, every fused output for adaptation.
std::vector<std::vector<std::vector<double>>> loss_deltas(const CaseSpec& spec,
                                                          const EIFModel& model,
                                                          const CaseContext& ctx) {
  const std::size_t comps = static_cast<std::size_t>(spec.components);
  std::vector<std::vector<std::vector<double>>> out(comps);

  const auto grab = [](const Tape& tape, const NigTapeIds& ids) {
    return tape.value(ids.delta).values;
  };

  Tape tape;
  GraphSession session(tape, model.params());
  const int x_id = tape.constant(ctx.batch.x);
  std::vector<BranchTapeOut> bouts;
  for (int b = 0; b < model.branch_count(); ++b) {
    bouts.push_back(model.branch_graph(tape, session, b, x_id));
  }

  if (spec.kind == LossKind::kStage1) {
    const BranchTapeOut& bo = bouts[static_cast<std::size_t>(spec.branch)];
    for (std::size_t d = 0; d < comps; ++d) {
      for (const NigTapeIds& head : bo.components[d].heads) out[d].push_back(grab(tape, head));
      out[d].push_back(grab(tape, bo.components[d].fused));
    }
    return out;
  }

  std::vector<std::vector<NigTapeIds>> candidates(comps);
  for (const BranchTapeOut& bo : bouts) {
    for (std::size_t d = 0; d < comps; ++d) candidates[d].push_back(bo.components[d].fused);
  }
  if (spec.kind == LossKind::kAdapt) {
    for (const BranchTapeOut& bo : bouts) {
      for (std::size_t d = 0; d < comps; ++d) out[d].push_back(grab(tape, bo.components[d].fused));
    }
  }
  if (model.cross_enabled()) {
    const CrossTapeOut cross = model.cross_graph(tape, session, bouts);
    for (std::size_t d = 0; d < comps; ++d) {
      if (spec.kind == LossKind::kStage2) {
        for (const NigTapeIds& head : cross.components[d].heads) {
          out[d].push_back(grab(tape, head));
        }
      }
      out[d].push_back(grab(tape, cross.components[d].fused));
      candidates[d].push_back(cross.components[d].fused);
    }
  }
  const std::vector<NigTapeIds> fused = model.inter_fuse_graph(tape, candidates);
  for (std::size_t d = 0; d < comps; ++d) out[d].push_back(grab(tape, fused[d]));
  return out;
}

using LossBuilder = std::function<int(Tape&, GraphSession&)>;

// Central-difference sweep over every coordinate of every store parameter.
GradCheckCase sweep_parameters(const char* name, ParameterStore& store,
                               const LossBuilder& build, double tolerance) {
  store.zero_grads();
  {
    Tape tape;
    GraphSession session(tape, store);
    const int root = build(tape, session);
    tape.backward(root);
    session.accumulate_gradients(store);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(store.count());
  for (std::size_t p = 0; p < store.count(); ++p) {
    analytic.push_back(store.at(static_cast<int>(p)).grad);
  }
  store.zero_grads();

  Tape tape;
  const auto eval = [&](void) {
    tape.reset();
    GraphSession session(tape, store);
    return tape.value(build(tape, session)).values[0];
  };

  GradCheckCase result;
  result.name = name;
  result.tolerance = tolerance;
  for (std::size_t p = 0; p < store.count(); ++p) {
    Tensor& value = store.at(static_cast<int>(p)).value;
    for (std::size_t k = 0; k < value.values.size(); ++k) {
      const double orig = value.values[k];
      const double h = 1e-4 * std::max(1.0, std::abs(orig));
      value.values[k] = orig + h;
      const double up = eval();
      value.values[k] = orig - h;
      const double down = eval();
      value.values[k] = orig;
      const double fd = (up - down) / (2.0 * h);
      result.max_rel_error =
          std::max(result.max_rel_error, rel_error(analytic[p].values[k], fd));
      result.coordinates++;
    }
  }
  result.passed = result.max_rel_error < tolerance;
  return result;
}

GradCheckCase run_eif_case(const CaseSpec& spec, std::uint64_t seed, double tolerance) {
  Rng rng(seed);
  CaseContext ctx = make_context(spec, rng);

  std::vector<std::string> ids;
  for (int b = 0; b < spec.branches; ++b) ids.push_back("src" + std::to_string(b));
  EIFModel model(ctx.net, std::move(ids));
  for (int b = 0; b < spec.branches; ++b) {
    model.set_branch_partitions(b, random_partitions(rng, spec.components, spec.groups,
                                                     spec.overlap));
  }
  model.set_cross_partitions(random_partitions(rng, spec.components, spec.groups, spec.overlap));
  model.set_cross_enabled(spec.cross_on);
  model.init_params(derive_seed(seed, "init"));

  const auto deltas = loss_deltas(spec, model, ctx);
  for (std::size_t d = 0; d < deltas.size(); ++d) {
    for (std::size_t i = 0; i < ctx.batch.y[d].size(); ++i) {
      nudge_labels(ctx.batch.y[d], deltas[d], i, 2e-3);
    }
  }

  const LossBuilder build = [&](Tape& t, GraphSession& s) {
    switch (spec.kind) {
      case LossKind::kStage1:
        return stage1_loss_graph(model, t, s, spec.branch, ctx.batch, ctx.lambda).total;
      case LossKind::kStage2:
        return stage2_loss_graph(model, t, s, ctx.batch, ctx.lambda).total;
      default:
        return adapt_loss_graph(model, t, s, ctx.batch, ctx.lambda);
    }
  };
  return sweep_parameters(spec.name, model.params(), build, tolerance);
}

GradCheckCase run_baseline_case(const CaseSpec& spec, std::uint64_t seed, double tolerance) {
  Rng rng(seed);
  CaseContext ctx = make_context(spec, rng);

  BaselineModel model(ctx.net);
  model.init_params(derive_seed(seed, "init"));

  const std::vector<std::vector<double>> preds = model.predict(ctx.batch.x);
  for (std::size_t d = 0; d < ctx.batch.y.size(); ++d) {
    const std::vector<std::vector<double>> deltas{preds[d]};
    for (std::size_t i = 0; i < ctx.batch.y[d].size(); ++i) {
      nudge_labels(ctx.batch.y[d], deltas, i, 2e-3);
    }
  }

  const LossBuilder build = [&](Tape& t, GraphSession& s) {
    const BaselineModel::TapeOut out = model.graph(t, s, t.constant(ctx.batch.x));
    int loss = -1;
    for (std::size_t d = 0; d < ctx.batch.y.size(); ++d) {
      const int y_id = t.constant(Tensor::vector(ctx.batch.y[d]));
      const int term = t.mean(t.abs(t.sub(y_id, out.outputs[d])));
      loss = loss < 0 ? term : t.add(loss, term);
    }
    return loss;
  };
  return sweep_parameters(spec.name, model.params(), build, tolerance);
}

}  // namespace

bool GradCheckReport::all_passed() const {
  for (const GradCheckCase& c : cases) {
    if (!c.passed) return false;
  }
  return !cases.empty();
}

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const GradCheckCase& c : cases) w = std::max(w, c.max_rel_error);
  return w;
}

GradCheckReport run_gradcheck_suite(std::uint64_t seed, double tolerance) {
  const std::vector<CaseSpec> specs = {
      {"stage1-minimal", LossKind::kStage1, 1, {5, 4}, 1, 1, 1.5, 1, 2, 4, false, 0},
      {"stage1-groups", LossKind::kStage1, 1, {5, 4}, 1, 4, 2.0, 1, 2, 6, false, 0},
      {"stage1-tiling", LossKind::kStage1, 1, {6, 4}, 1, 3, 1.0, 2, 2, 5, false, 0},
      {"stage1-two-components", LossKind::kStage1, 2, {5, 4}, 1, 4, 2.0, 2, 2, 6, false, 0},
      {"stage1-second-branch", LossKind::kStage1, 2, {5, 4}, 1, 4, 2.0, 2, 2, 6, false, 1},
      {"stage1-deep", LossKind::kStage1, 1, {6, 5, 4}, 2, 2, 1.5, 1, 2, 4, false, 0},
      {"stage1-wide-overlap", LossKind::kStage1, 1, {5, 4}, 1, 4, 3.0, 1, 2, 5, false, 0},
      {"stage1-three-inputs", LossKind::kStage1, 1, {5, 4}, 1, 2, 2.0, 2, 3, 5, false, 0},
      {"stage1-single-sample", LossKind::kStage1, 1, {5, 4}, 1, 2, 1.5, 1, 2, 1, false, 0},
      {"stage1-sparse-groups", LossKind::kStage1, 1, {5, 4}, 1, 5, 1.5, 1, 2, 2, false, 0},
      {"stage1-eight-groups", LossKind::kStage1, 1, {4, 4}, 1, 8, 2.0, 1, 2, 8, false, 0},
      {"stage1-one-input", LossKind::kStage1, 1, {5, 3}, 1, 2, 1.5, 1, 1, 4, false, 0},
      {"stage2-pair", LossKind::kStage2, 2, {5, 4}, 1, 3, 2.0, 2, 2, 5, true, 0},
      {"stage2-no-cross", LossKind::kStage2, 2, {5, 4}, 1, 3, 2.0, 2, 2, 5, false, 0},
      {"stage2-trio", LossKind::kStage2, 3, {4, 4}, 1, 2, 1.5, 1, 2, 4, true, 0},
      {"stage2-two-fusion-depths", LossKind::kStage2, 2, {5, 4, 4}, 1, 2, 2.0, 1, 2, 4, true, 0},
      {"stage2-late-fusion", LossKind::kStage2, 2, {5, 4, 4}, 2, 2, 2.0, 2, 2, 4, true, 0},
      {"stage2-one-group", LossKind::kStage2, 2, {5, 4}, 1, 1, 1.5, 1, 2, 4, true, 0},
      {"stage2-single-sample", LossKind::kStage2, 2, {5, 4}, 1, 2, 1.5, 1, 2, 1, true, 0},
      {"stage2-three-inputs", LossKind::kStage2, 2, {5, 4}, 1, 2, 2.0, 2, 3, 4, true, 0},
      {"stage2-full-depth", LossKind::kStage2, 2, {4, 4, 3, 3}, 3, 2, 2.0, 1, 2, 3, true, 0},
      {"adapt-pair", LossKind::kAdapt, 2, {5, 4}, 1, 2, 2.0, 2, 2, 4, true, 0},
      {"adapt-no-cross", LossKind::kAdapt, 2, {5, 4}, 1, 2, 2.0, 1, 2, 4, false, 0},
      {"baseline-l1", LossKind::kBaseline, 1, {5, 4}, 1, 2, 2.0, 2, 2, 5, false, 0},
  };

  GradCheckReport report;
  report.cases.reserve(specs.size());
  for (const CaseSpec& spec : specs) {
    const std::uint64_t case_seed = derive_seed(seed, spec.name);
    if (spec.kind == LossKind::kBaseline) {
      report.cases.push_back(run_baseline_case(spec, case_seed, tolerance));
    } else {
      report.cases.push_back(run_eif_case(spec, case_seed, tolerance));
    }
  }
  return report;
}

}  // namespace evifuse
