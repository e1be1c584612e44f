#include "evifuse/model.hpp"

#include <cmath>
#include <string>

#include "evifuse/errors.hpp"
#include "evifuse/rng.hpp"

namespace evifuse {

void NetworkConfig::validate() const {
  if (input_dim < 1) throw ConfigError("network.input_dim must be >= 1");
  if (feature_layer_sizes.empty()) throw ConfigError("network.feature_layers must not be empty");
  for (int w : feature_layer_sizes)
    if (w < 1) throw ConfigError("network.feature_layers entries must be >= 1");
  if (mff_start_layer < 1 || mff_start_layer > depth() - 1)
    throw ConfigError("network.mff_start_layer must lie in [1, depth-1]");
  if (group_count < 1) throw ConfigError("network.group_count must be >= 1");
  if (!(overlap >= 1.0)) throw ConfigError("network.overlap must be >= 1");
  if (output_components < 1) throw ConfigError("network.output_components must be >= 1");
}

int GraphSession::param(int store_index) {
  auto it = leaves_.find(store_index);
  if (it != leaves_.end()) return it->second;
  const int id = tape_.leaf(store_.at(store_index).value);
  leaves_.emplace(store_index, id);
  return id;
}

void GraphSession::accumulate_gradients(ParameterStore& store) const {
  for (const auto& [pidx, tid] : leaves_) {
    const Tensor& g = tape_.gradient(tid);
    Tensor& dst = store.at(pidx).grad;
    for (std::size_t i = 0; i < dst.size(); ++i) dst.values[i] += g.values[i];
  }
}

NigTapeIds monig_fuse_graph(Tape& tape, const std::vector<NigTapeIds>& inputs) {
  if (inputs.empty()) throw PreconditionError("monig_fuse_graph: no inputs");
  const double inv_m = 1.0 / static_cast<double>(inputs.size());

  int gamma_sum = inputs[0].gamma;
  int alpha_sum = inputs[0].alpha;
  int beta_sum = inputs[0].beta;
  int weighted = tape.mul(inputs[0].gamma, inputs[0].delta);
  for (std::size_t i = 1; i < inputs.size(); ++i) {
    gamma_sum = tape.add(gamma_sum, inputs[i].gamma);
    alpha_sum = tape.add(alpha_sum, inputs[i].alpha);
    beta_sum = tape.add(beta_sum, inputs[i].beta);
    weighted = tape.add(weighted, tape.mul(inputs[i].gamma, inputs[i].delta));
  }

  NigTapeIds out;
  out.delta = tape.div(weighted, gamma_sum);
  out.gamma = gamma_sum;
  out.alpha = tape.add_scalar(alpha_sum, inv_m);

  int dispersion = -1;
  for (const NigTapeIds& in : inputs) {
    const int term = tape.mul(in.gamma, tape.square(tape.sub(in.delta, out.delta)));
    dispersion = dispersion < 0 ? term : tape.add(dispersion, term);
  }
  out.beta = tape.add(beta_sum, tape.mul_scalar(dispersion, inv_m));
  return out;
}

EIFModel::EIFModel(NetworkConfig cfg, std::vector<std::string> dataset_ids) : cfg_(cfg) {
  cfg_.validate();
  if (dataset_ids.empty()) throw PreconditionError("EIFModel requires at least one dataset id");
  branches_.reserve(dataset_ids.size());
  for (std::size_t i = 0; i < dataset_ids.size(); ++i)
    build_branch(static_cast<int>(i), dataset_ids[i]);
  build_cross();
}

AffineIds EIFModel::add_affine(const std::string& name, std::size_t in, std::size_t out,
                               double init_scale_mult) {
  AffineIds ids;
  ids.w = store_.add(name + "W", Tensor::zeros({in, out}));
  init_half_width_.push_back(init_scale_mult / std::sqrt(static_cast<double>(in)));
  ids.b = store_.add(name + "b", Tensor::zeros({out}));
  init_half_width_.push_back(0.0);
  return ids;
}

void EIFModel::build_branch(int index, const std::string& dataset_id) {
  BranchModule mod;
  mod.prefix = "branch" + std::to_string(index);
  mod.dataset_id = dataset_id;

  std::size_t in = static_cast<std::size_t>(cfg_.input_dim);
  for (int l = 1; l <= cfg_.depth(); ++l) {
    const std::size_t out = static_cast<std::size_t>(cfg_.feature_layer_sizes[l - 1]);
    mod.layers.push_back(
        add_affine(mod.prefix + "/layer" + std::to_string(l) + "/", in, out, 1.0));
    in = out;
  }

  const std::size_t feat = in;
  mod.heads.resize(static_cast<std::size_t>(cfg_.output_components));
  for (int d = 0; d < cfg_.output_components; ++d) {
    for (int g = 0; g < cfg_.group_count; ++g) {
      mod.heads[static_cast<std::size_t>(d)].push_back(
          add_affine(mod.prefix + "/comp" + std::to_string(d) + "/head" + std::to_string(g) +
                         "/",
                     feat, 4, kHeadInitScale));
    }
  }
  branches_.push_back(std::move(mod));
}

void EIFModel::build_cross() {
  const int k_start = cfg_.mff_start_layer;
  const int depth = cfg_.depth();
  const int n_branches = branch_count();

  for (int k = k_start; k <= depth - 1; ++k) {
    MffModule mff;
    mff.layer = k;
    const std::size_t width = static_cast<std::size_t>(cfg_.feature_layer_sizes[k - 1]);
    const int inputs = n_branches + (k > k_start ? 1 : 0);
    const std::string base = "cross/mff" + std::to_string(k) + "/";
    for (int i = 0; i < inputs; ++i) {
      const std::size_t in_width =
          i < n_branches ? width : static_cast<std::size_t>(cfg_.feature_layer_sizes[k - 2]);
      mff.projections.push_back(
          add_affine(base + "proj" + std::to_string(i) + "/", in_width, width, 1.0));
    }
    const std::size_t hidden = width / 2 > 0 ? width / 2 : 1;
    for (int j = 0; j + 1 < inputs; ++j) {
      GateIds gate;
      gate.l1 = add_affine(base + "gate" + std::to_string(j) + "/l1/", 2 * width, hidden, 1.0);
      gate.l2 = add_affine(base + "gate" + std::to_string(j) + "/l2/", hidden, width, 1.0);
      mff.gates.push_back(gate);
    }
    cross_.mffs.push_back(std::move(mff));
  }

  const std::size_t in_width = static_cast<std::size_t>(cfg_.feature_layer_sizes[depth - 2]);
  const std::size_t out_width = static_cast<std::size_t>(cfg_.feature_layer_sizes[depth - 1]);
  cross_.final_layer =
      add_affine("cross/layer" + std::to_string(depth) + "/", in_width, out_width, 1.0);

  cross_.heads.resize(static_cast<std::size_t>(cfg_.output_components));
  for (int d = 0; d < cfg_.output_components; ++d) {
    for (int g = 0; g < cfg_.group_count; ++g) {
      cross_.heads[static_cast<std::size_t>(d)].push_back(
          add_affine("cross/comp" + std::to_string(d) + "/head" + std::to_string(g) + "/",
                     out_width, 4, kHeadInitScale));
    }
  }
}

void EIFModel::init_params(std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < store_.count(); ++i) {
    const double hw = init_half_width_[i];
    Tensor& t = store_.at(static_cast<int>(i)).value;
    for (double& v : t.values) v = hw == 0.0 ? 0.0 : rng.uniform(-hw, hw);
  }
}

void EIFModel::set_branch_partitions(int branch, std::vector<PartitionSpec> parts) {
  if (branch < 0 || branch >= branch_count())
    throw PreconditionError("set_branch_partitions: branch index out of range");
  if (parts.size() != static_cast<std::size_t>(cfg_.output_components))
    throw PreconditionError("set_branch_partitions: one partition per output component");
  for (const PartitionSpec& p : parts)
    if (p.group_count != cfg_.group_count)
      throw PreconditionError("set_branch_partitions: partition group count mismatch");
  branches_[static_cast<std::size_t>(branch)].partitions = std::move(parts);
}

void EIFModel::set_cross_partitions(std::vector<PartitionSpec> parts) {
  if (parts.size() != static_cast<std::size_t>(cfg_.output_components))
    throw PreconditionError("set_cross_partitions: one partition per output component");
  for (const PartitionSpec& p : parts)
    if (p.group_count != cfg_.group_count)
      throw PreconditionError("set_cross_partitions: partition group count mismatch");
  cross_.partitions = std::move(parts);
  cross_partitions_set_ = true;
}

namespace {

void collect_affine(std::vector<int>& out, const AffineIds& ids) {
  out.push_back(ids.w);
  out.push_back(ids.b);
}

}  // namespace

std::vector<int> EIFModel::branch_param_indices(int branch) const {
  const BranchModule& mod = branches_[static_cast<std::size_t>(branch)];
  std::vector<int> out;
  for (const AffineIds& l : mod.layers) collect_affine(out, l);
  for (const auto& comp : mod.heads)
    for (const AffineIds& h : comp) collect_affine(out, h);
  return out;
}

std::vector<int> EIFModel::cross_param_indices() const {
  std::vector<int> out;
  for (const MffModule& mff : cross_.mffs) {
    for (const AffineIds& p : mff.projections) collect_affine(out, p);
    for (const GateIds& g : mff.gates) {
      collect_affine(out, g.l1);
      collect_affine(out, g.l2);
    }
  }
  collect_affine(out, cross_.final_layer);
  for (const auto& comp : cross_.heads)
    for (const AffineIds& h : comp) collect_affine(out, h);
  return out;
}

std::vector<int> EIFModel::all_param_indices() const {
  std::vector<int> out(store_.count());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(i);
  return out;
}

ComponentTapeIds EIFModel::component_graph(Tape& tape, GraphSession& session,
                                           const std::vector<AffineIds>& heads,
                                           const PartitionSpec& partition, int feature) const {
  ComponentTapeIds out;
  out.heads.reserve(heads.size());
  for (std::size_t g = 0; g < heads.size(); ++g) {
    const LabelGroup& group = partition.groups[g];
    const int raw = tape.affine(feature, session.param(heads[g].w), session.param(heads[g].b));
    NigTapeIds nig;
    const int offset = tape.tanh(tape.column(raw, 0));
    nig.delta = tape.add_scalar(tape.mul_scalar(offset, group.length * 0.5), group.center);
    nig.gamma = tape.add_scalar(tape.softplus(tape.column(raw, 1)), kGammaFloor);
    nig.alpha = tape.add_scalar(tape.softplus(tape.column(raw, 2)), 1.0 + kAlphaFloor);
    nig.beta = tape.add_scalar(tape.softplus(tape.column(raw, 3)), kBetaFloor);
    out.heads.push_back(nig);
  }
  out.fused = monig_fuse_graph(tape, out.heads);
  return out;
}

BranchTapeOut EIFModel::branch_graph(Tape& tape, GraphSession& session, int branch,
                                     int x_id) const {
  const BranchModule& mod = branches_[static_cast<std::size_t>(branch)];
  if (mod.partitions.size() != static_cast<std::size_t>(cfg_.output_components))
    throw UsageError("branch partitions not set: " + mod.prefix);
  if (tape.value(x_id).cols() != static_cast<std::size_t>(cfg_.input_dim))
    throw StructuralError("branch_graph: input width != input_dim");

  BranchTapeOut out;
  int h = x_id;
  for (const AffineIds& layer : mod.layers) {
    h = tape.tanh(tape.affine(h, session.param(layer.w), session.param(layer.b)));
    out.features.push_back(h);
  }
  for (int d = 0; d < cfg_.output_components; ++d) {
    out.components.push_back(component_graph(tape, session,
                                             mod.heads[static_cast<std::size_t>(d)],
                                             mod.partitions[static_cast<std::size_t>(d)], h));
  }
  return out;
}

int EIFModel::mff_graph(Tape& tape, GraphSession& session, const MffModule& mff,
                        const std::vector<int>& branch_features, int previous_cross) const {
  std::vector<int> inputs = branch_features;
  if (previous_cross >= 0) inputs.push_back(previous_cross);
  if (inputs.size() != mff.projections.size())
    throw StructuralError("mff_graph: input count does not match module arity");

  std::vector<int> projected;
  projected.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    projected.push_back(tape.affine(inputs[i], session.param(mff.projections[i].w),
                                    session.param(mff.projections[i].b)));
  }

  int acc = projected[0];
  for (std::size_t j = 1; j < projected.size(); ++j) {
    const GateIds& gate = mff.gates[j - 1];
    const int cat = tape.concat(acc, projected[j]);
    const int hidden = tape.tanh(tape.affine(cat, session.param(gate.l1.w),
                                             session.param(gate.l1.b)));
    const int g = tape.sigmoid(tape.affine(hidden, session.param(gate.l2.w),
                                           session.param(gate.l2.b)));
    const int keep = tape.mul(g, acc);
    const int take = tape.mul(tape.add_scalar(tape.mul_scalar(g, -1.0), 1.0), projected[j]);
    acc = tape.add(keep, take);
  }
  return acc;
}

CrossTapeOut EIFModel::cross_graph(Tape& tape, GraphSession& session,
                                   const std::vector<BranchTapeOut>& branch_outs) const {
  if (!cross_partitions_set_) throw UsageError("cross partitions not set");
  if (branch_outs.size() != static_cast<std::size_t>(branch_count()))
    throw StructuralError("cross_graph: expected one output per branch");

  const int k_start = cfg_.mff_start_layer;
  int fused_feature = -1;
  for (std::size_t m = 0; m < cross_.mffs.size(); ++m) {
    const int k = cross_.mffs[m].layer;
    std::vector<int> feats;
    feats.reserve(branch_outs.size());
    for (const BranchTapeOut& bo : branch_outs)
      feats.push_back(bo.features[static_cast<std::size_t>(k - 1)]);
    fused_feature = mff_graph(tape, session, cross_.mffs[m], feats,
                              k == k_start ? -1 : fused_feature);
  }

  CrossTapeOut out;
  out.final_feature = tape.tanh(tape.affine(fused_feature, session.param(cross_.final_layer.w),
                                            session.param(cross_.final_layer.b)));
  for (int d = 0; d < cfg_.output_components; ++d) {
    out.components.push_back(component_graph(tape, session,
                                             cross_.heads[static_cast<std::size_t>(d)],
                                             cross_.partitions[static_cast<std::size_t>(d)],
                                             out.final_feature));
  }
  return out;
}

std::vector<NigTapeIds> EIFModel::inter_fuse_graph(
    Tape& tape, const std::vector<std::vector<NigTapeIds>>& candidates) const {
  if (candidates.empty()) throw PreconditionError("inter_fuse_graph: no candidates");
  if (candidates.size() == 1) return candidates[0];
  std::vector<NigTapeIds> out;
  for (int d = 0; d < cfg_.output_components; ++d) {
    std::vector<NigTapeIds> per_candidate;
    per_candidate.reserve(candidates.size());
    for (const auto& c : candidates) per_candidate.push_back(c[static_cast<std::size_t>(d)]);
    out.push_back(monig_fuse_graph(tape, per_candidate));
  }
  return out;
}

namespace {

NIGParams nig_at(const Tape& tape, const NigTapeIds& ids, std::size_t i) {
  NIGParams p;
  p.delta = tape.value(ids.delta).values[i];
  p.gamma = tape.value(ids.gamma).values[i];
  p.alpha = tape.value(ids.alpha).values[i];
  p.beta = tape.value(ids.beta).values[i];
  return p;
}

}  // namespace

BranchForwardResult EIFModel::branch_forward(int branch, const Tensor& x) const {
  Tape tape;
  GraphSession session(tape, store_);
  const int x_id = tape.constant(x);
  const BranchTapeOut out = branch_graph(tape, session, branch, x_id);

  const std::size_t n = x.rows();
  BranchForwardResult res;
  res.heads.resize(out.components.size());
  res.fused.resize(out.components.size());
  for (std::size_t d = 0; d < out.components.size(); ++d) {
    res.heads[d].resize(out.components[d].heads.size());
    for (std::size_t g = 0; g < out.components[d].heads.size(); ++g) {
      res.heads[d][g].reserve(n);
      for (std::size_t i = 0; i < n; ++i)
        res.heads[d][g].push_back(nig_at(tape, out.components[d].heads[g], i));
    }
    res.fused[d].reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      res.fused[d].push_back(nig_at(tape, out.components[d].fused, i));
  }
  return res;
}

EifForwardResult EIFModel::forward(const Tensor& x, bool collect_diagnostics) const {
  Tape tape;
  GraphSession session(tape, store_);
  const int x_id = tape.constant(x);

  std::vector<BranchTapeOut> branch_outs;
  branch_outs.reserve(static_cast<std::size_t>(branch_count()));
  for (int b = 0; b < branch_count(); ++b)
    branch_outs.push_back(branch_graph(tape, session, b, x_id));

  std::vector<std::vector<NigTapeIds>> candidates;
  for (const BranchTapeOut& bo : branch_outs) {
    std::vector<NigTapeIds> fused;
    for (const ComponentTapeIds& c : bo.components) fused.push_back(c.fused);
    candidates.push_back(std::move(fused));
  }
  CrossTapeOut cross_out;
  if (cross_enabled_) {
    cross_out = cross_graph(tape, session, branch_outs);
    std::vector<NigTapeIds> fused;
    for (const ComponentTapeIds& c : cross_out.components) fused.push_back(c.fused);
    candidates.push_back(std::move(fused));
  }

  const std::vector<NigTapeIds> final_ids = inter_fuse_graph(tape, candidates);

  const std::size_t n = x.rows();
  const std::size_t n_comp = static_cast<std::size_t>(cfg_.output_components);
  const std::size_t n_cand = candidates.size();

  EifForwardResult res;
  res.fused.resize(n_comp);
  res.report.resize(n_comp);
  for (std::size_t d = 0; d < n_comp; ++d) {
    res.fused[d].reserve(n);
    res.report[d].reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const NIGParams p = nig_at(tape, final_ids[d], i);
      res.fused[d].push_back(p);
      res.report[d].push_back(uncertainty(p));
    }
  }

  if (collect_diagnostics) {
    ForwardDiagnostics& diag = res.diag;
    diag.branch_weights.assign(n_comp, {});
    diag.regressor_weights.assign(n_cand, {});
    diag.branch_fused.assign(n_cand, {});

    for (std::size_t d = 0; d < n_comp; ++d) {
      diag.branch_weights[d].resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        double total = 0.0;
        std::vector<double> w(n_cand);
        for (std::size_t c = 0; c < n_cand; ++c) {
          w[c] = tape.value(candidates[c][d].gamma).values[i];
          total += w[c];
        }
        for (double& v : w) v /= total;
        diag.branch_weights[d][i] = std::move(w);
      }
    }

    for (std::size_t c = 0; c < n_cand; ++c) {
      const std::vector<ComponentTapeIds>* comps =
          c < static_cast<std::size_t>(branch_count()) ? &branch_outs[c].components
                                                       : &cross_out.components;
      diag.regressor_weights[c].resize(n_comp);
      diag.branch_fused[c].resize(n_comp);
      for (std::size_t d = 0; d < n_comp; ++d) {
        diag.regressor_weights[c][d].resize(n);
        diag.branch_fused[c][d].reserve(n);
        const ComponentTapeIds& comp = (*comps)[d];
        for (std::size_t i = 0; i < n; ++i) {
          double total = 0.0;
          std::vector<double> w(comp.heads.size());
          for (std::size_t g = 0; g < comp.heads.size(); ++g) {
            w[g] = tape.value(comp.heads[g].gamma).values[i];
            total += w[g];
          }
          for (double& v : w) v /= total;
          diag.regressor_weights[c][d][i] = std::move(w);
          diag.branch_fused[c][d].push_back(nig_at(tape, comp.fused, i));
        }
      }
    }
  }
  return res;
}

std::vector<std::vector<double>> EIFModel::average_fusion_predict(const Tensor& x) const {
  Tape tape;
  GraphSession session(tape, store_);
  const int x_id = tape.constant(x);

  const std::size_t n = x.rows();
  const std::size_t n_comp = static_cast<std::size_t>(cfg_.output_components);
  std::vector<std::vector<double>> out(n_comp, std::vector<double>(n, 0.0));
  for (int b = 0; b < branch_count(); ++b) {
    const BranchTapeOut bo = branch_graph(tape, session, b, x_id);
    for (std::size_t d = 0; d < n_comp; ++d) {
      const Tensor& delta = tape.value(bo.components[d].fused.delta);
      for (std::size_t i = 0; i < n; ++i) out[d][i] += delta.values[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(branch_count());
  for (auto& comp : out)
    for (double& v : comp) v *= inv;
  return out;
}

BaselineModel::BaselineModel(NetworkConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  std::size_t in = static_cast<std::size_t>(cfg_.input_dim);
  for (int l = 1; l <= cfg_.depth(); ++l) {
    const std::size_t out = static_cast<std::size_t>(cfg_.feature_layer_sizes[l - 1]);
    AffineIds ids;
    const std::string base = "branch0/layer" + std::to_string(l) + "/";
    ids.w = store_.add(base + "W", Tensor::zeros({in, out}));
    init_half_width_.push_back(1.0 / std::sqrt(static_cast<double>(in)));
    ids.b = store_.add(base + "b", Tensor::zeros({out}));
    init_half_width_.push_back(0.0);
    layers_.push_back(ids);
    in = out;
  }
  for (int d = 0; d < cfg_.output_components; ++d) {
    AffineIds ids;
    const std::string base = "branch0/comp" + std::to_string(d) + "/head0/";
    ids.w = store_.add(base + "W", Tensor::zeros({in, 1}));
    init_half_width_.push_back(kHeadInitScale / std::sqrt(static_cast<double>(in)));
    ids.b = store_.add(base + "b", Tensor::zeros({1}));
    init_half_width_.push_back(0.0);
    heads_.push_back(ids);
  }
}

void BaselineModel::init_params(std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < store_.count(); ++i) {
    const double hw = init_half_width_[i];
    Tensor& t = store_.at(static_cast<int>(i)).value;
    for (double& v : t.values) v = hw == 0.0 ? 0.0 : rng.uniform(-hw, hw);
  }
}

BaselineModel::TapeOut BaselineModel::graph(Tape& tape, GraphSession& session, int x_id) const {
  if (tape.value(x_id).cols() != static_cast<std::size_t>(cfg_.input_dim))
    throw StructuralError("baseline graph: input width != input_dim");
  TapeOut out;
  int h = x_id;
  for (const AffineIds& layer : layers_)
    h = tape.tanh(tape.affine(h, session.param(layer.w), session.param(layer.b)));
  out.feature = h;
  for (const AffineIds& head : heads_) {
    const int raw = tape.affine(h, session.param(head.w), session.param(head.b));
    out.outputs.push_back(tape.column(raw, 0));
  }
  return out;
}

std::vector<std::vector<double>> BaselineModel::predict(const Tensor& x) const {
  Tape tape;
  GraphSession session(tape, store_);
  const TapeOut out = graph(tape, session, tape.constant(x));
  std::vector<std::vector<double>> res;
  res.reserve(out.outputs.size());
  for (int id : out.outputs) res.push_back(tape.value(id).values);
  return res;
}

}  // namespace evifuse
