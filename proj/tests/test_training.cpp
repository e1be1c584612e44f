#include <cmath>
#include <cstdint>
#include <vector>

#include <doctest.h>

#include "evifuse/errors.hpp"
#include "evifuse/model.hpp"
#include "evifuse/rng.hpp"
#include "evifuse/synth_data.hpp"
#include "evifuse/training.hpp"

using namespace evifuse;

namespace {

NetworkConfig small_config() {
  NetworkConfig cfg;
  cfg.input_dim = 2;
  cfg.feature_layer_sizes = {8, 8, 8};
  cfg.mff_start_layer = 2;
  cfg.group_count = 3;
  cfg.overlap = 1.5;
  cfg.output_components = 2;
  return cfg;
}

DomainSpec tiny_spec(const char* id, double mean0) {
  DomainSpec spec;
  spec.domain_id = id;
  spec.input_mean = {mean0, 0.0};
  spec.input_spread = {1.0, 1.0};
  spec.targets = {{TargetKind::kSaturatingRamp, {1.0, 0.3, 1.5, 0.8, 0.0}},
                  {TargetKind::kCubicBlend, {0.4, -0.6, 0.05, 0.4, -0.1}}};
  spec.base_sigma = 0.15;
  spec.sample_count = 300;
  return spec;
}

EIFModel trained_fixture(const std::vector<Dataset>& sources, std::uint64_t seed) {
  const NetworkConfig net = small_config();
  std::vector<std::string> ids;
  for (const Dataset& d : sources) ids.push_back(d.domain_id);
  EIFModel model(net, ids);
  model.init_params(seed);
  for (std::size_t b = 0; b < sources.size(); ++b) {
    std::vector<PartitionSpec> parts;
    for (int c = 0; c < net.output_components; ++c) {
      parts.push_back(
          build_partition(sources[b].component_labels(c), net.group_count, net.overlap));
    }
    model.set_branch_partitions(static_cast<int>(b), parts);
  }
  std::vector<PartitionSpec> cross_parts;
  for (int c = 0; c < net.output_components; ++c) {
    std::vector<double> pool;
    for (const Dataset& d : sources) {
      const std::vector<double> ys = d.component_labels(c);
      pool.insert(pool.end(), ys.begin(), ys.end());
    }
    cross_parts.push_back(build_partition(pool, net.group_count, net.overlap));
  }
  model.set_cross_partitions(cross_parts);
  return model;
}

std::vector<Tensor> snapshot(const ParameterStore& store, const std::vector<int>& ids) {
  std::vector<Tensor> out;
  for (int i : ids) out.push_back(store.at(i).value);
  return out;
}

bool bit_equal(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].values != b[i].values) return false;
  }
  return true;
}

BatchData batch_from(const Dataset& ds, std::size_t n) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < n; ++i) rows.push_back(i);
  const Dataset sub = dataset_subset(ds, rows);
  BatchData batch;
  batch.x = input_tensor(sub);
  batch.y.resize(static_cast<std::size_t>(sub.components()));
  for (int c = 0; c < sub.components(); ++c) {
    batch.y[static_cast<std::size_t>(c)] = sub.component_labels(c);
  }
  return batch;
}

}  // namespace

TEST_CASE("balanced batches draw datasets at equal rates") {
  const Dataset big = generate_domain(tiny_spec("big", -1.0), 1);
  DomainSpec small_dom = tiny_spec("small", 1.0);
  small_dom.sample_count = 60;
  const Dataset small = generate_domain(small_dom, 2);
  const std::vector<const Dataset*> sets = {&big, &small};

  Rng rng(7);
  std::size_t from_big = 0, total = 0;
  while (total < 100000) {
    const std::vector<SampleRef> refs = balanced_batch(sets, 64, rng);
    REQUIRE(refs.size() == 64);
    for (const SampleRef& r : refs) {
      REQUIRE(r.dataset >= 0);
      REQUIRE(r.dataset < 2);
      const std::size_t limit = r.dataset == 0 ? big.size() : small.size();
      REQUIRE(r.row < limit);
      if (r.dataset == 0) ++from_big;
    }
    total += refs.size();
  }
  const double share = static_cast<double>(from_big) / static_cast<double>(total);
  CHECK(std::abs(share - 0.5) < 0.01);
}

TEST_CASE("simple mixing draws rows in proportion to dataset size") {
  // The 2:1 pooled share is a property of uniform row draws over the
  // concatenated pool; measured through the baseline trainer's sampler by
  // pooling the rows directly.
  const Dataset big = generate_domain(tiny_spec("big", -1.0), 3);
  DomainSpec half = tiny_spec("small", 1.0);
  half.sample_count = 150;
  const Dataset small = generate_domain(half, 4);

  // Pool as train_baseline(kSimpleMix) does: one virtual dataset of all
  // rows, drawn uniformly.
  Rng rng(11);
  const std::size_t pool = big.size() + small.size();
  std::size_t from_big = 0;
  const std::size_t draws = 100000;
  for (std::size_t i = 0; i < draws; ++i) {
    if (rng.below(pool) < big.size()) ++from_big;
  }
  const double share = static_cast<double>(from_big) / static_cast<double>(draws);
  CHECK(std::abs(share - 2.0 / 3.0) < 0.01);
}

TEST_CASE("assemble_batch gathers rows faithfully") {
  const Dataset a = generate_domain(tiny_spec("a", 0.0), 5);
  const Dataset b = generate_domain(tiny_spec("b", 2.0), 6);
  const std::vector<const Dataset*> sets = {&a, &b};
  const std::vector<SampleRef> refs = {{0, 3}, {1, 7}, {0, 0}};
  const BatchData batch = assemble_batch(sets, refs);
  REQUIRE(batch.size() == 3);
  CHECK(batch.x.at(0, 0) == a.inputs[3][0]);
  CHECK(batch.x.at(1, 1) == b.inputs[7][1]);
  CHECK(batch.y[0][0] == a.labels[3][0]);
  CHECK(batch.y[1][1] == b.labels[7][1]);
  CHECK(batch.y[0][2] == a.labels[0][0]);
}

TEST_CASE("stage 1 loss bookkeeping: total equals local plus global") {
  const Dataset src = generate_domain(tiny_spec("src", 0.0), 9);
  EIFModel model = trained_fixture({src}, 31);
  const BatchData batch = batch_from(src, 48);

  Tape tape;
  GraphSession session(tape, model.params());
  const Stage1LossIds ids = stage1_loss_graph(model, tape, session, 0, batch, 0.01);
  REQUIRE(ids.total >= 0);
  const double total = tape.value(ids.total).at(0);
  CHECK(std::abs(total - (ids.local_value() + ids.global_value())) < 1e-9);

  // Components and groups are all represented on a 48-sample batch.
  REQUIRE(ids.local.size() == 2);
  for (const auto& groups : ids.local) REQUIRE(groups.size() == 3);
  REQUIRE(ids.global_term.size() == 2);
}

TEST_CASE("stage 2 loss bookkeeping: total equals cross plus joint") {
  const Dataset s0 = generate_domain(tiny_spec("s0", -1.0), 13);
  const Dataset s1 = generate_domain(tiny_spec("s1", 1.0), 14);
  EIFModel model = trained_fixture({s0, s1}, 37);
  const BatchData batch = batch_from(s0, 32);

  Tape tape;
  GraphSession session(tape, model.params());
  const Stage2LossIds ids = stage2_loss_graph(model, tape, session, batch, 0.01);
  REQUIRE(ids.total >= 0);
  REQUIRE(ids.cross_term >= 0);
  REQUIRE(ids.joint_term >= 0);
  const double total = tape.value(ids.total).at(0);
  const double cross = tape.value(ids.cross_term).at(0);
  const double joint = tape.value(ids.joint_term).at(0);
  CHECK(std::abs(total - (cross + joint)) < 1e-9);

  // With the cross branch ablated the cross term disappears.
  model.set_cross_enabled(false);
  Tape tape2;
  GraphSession session2(tape2, model.params());
  const Stage2LossIds ids2 = stage2_loss_graph(model, tape2, session2, batch, 0.01);
  CHECK(ids2.cross_term == -1);
  CHECK(tape2.value(ids2.total).at(0) ==
        doctest::Approx(tape2.value(ids2.joint_term).at(0)).epsilon(1e-12));
}

TEST_CASE("masked local losses only see their group members") {
  // A sample that falls in exactly one group must contribute to exactly
  // that group's local term: perturbing another group's head weights does
  // not move the first group's loss value.
  const Dataset src = generate_domain(tiny_spec("src", 0.0), 41);
  EIFModel model = trained_fixture({src}, 43);
  const PartitionSpec& part = model.branch(0).partitions[0];

  // Pick a sample strictly inside group 0 only.
  std::size_t pick = src.size();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const std::vector<int> hits = group_membership(part, src.labels[i][0]);
    if (hits.size() == 1 && hits[0] == 0) {
      pick = i;
      break;
    }
  }
  REQUIRE(pick < src.size());
  const Dataset one = dataset_subset(src, {pick});
  BatchData batch;
  batch.x = input_tensor(one);
  batch.y = {one.component_labels(0), one.component_labels(1)};

  Tape tape;
  GraphSession session(tape, model.params());
  const Stage1LossIds ids = stage1_loss_graph(model, tape, session, 0, batch, 0.01);
  CHECK(ids.local[0][0] >= 0);   // the covering group carries a term
  CHECK(ids.local[0][2] == -1);  // a non-member group has no contribution

  // Backward through the member group's local term alone: gradient reaches
  // that head and no other (the global term is what couples the rest).
  tape.backward(ids.local[0][0]);
  ParameterStore& store = model.params();
  store.zero_grads();
  session.accumulate_gradients(store);
  const auto head_grad_norm = [&](int component, int group) {
    const AffineIds& head =
        model.branch(0).heads[static_cast<std::size_t>(component)][static_cast<std::size_t>(group)];
    double acc = 0.0;
    for (double g : store.at(head.w).grad.values) acc += g * g;
    for (double g : store.at(head.b).grad.values) acc += g * g;
    return std::sqrt(acc);
  };
  CHECK(head_grad_norm(0, 0) > 0.0);
  CHECK(head_grad_norm(0, 2) == 0.0);
  CHECK(head_grad_norm(1, 0) == 0.0);
}

TEST_CASE("evidential loss graph returns -1 on an all-zero mask") {
  EIFModel model = trained_fixture({generate_domain(tiny_spec("src", 0.0), 47)}, 3);
  Tape tape;
  NigTapeIds nig;
  nig.delta = tape.leaf(Tensor::vector({0.1, 0.2}));
  nig.gamma = tape.leaf(Tensor::vector({1.0, 1.0}));
  nig.alpha = tape.leaf(Tensor::vector({2.0, 2.0}));
  nig.beta = tape.leaf(Tensor::vector({1.0, 1.0}));
  const std::vector<double> y = {0.0, 0.0};
  const std::vector<double> zero_mask = {0.0, 0.0};
  CHECK(evidential_loss_graph(tape, nig, y, 0.01, &zero_mask) == -1);
  const int unmasked = evidential_loss_graph(tape, nig, y, 0.01, nullptr);
  REQUIRE(unmasked >= 0);
  // Against the closed form.
  const double expect = 0.5 * (evidential_loss({0.1, 1.0, 2.0, 1.0}, 0.0, 0.01).total +
                               evidential_loss({0.2, 1.0, 2.0, 1.0}, 0.0, 0.01).total);
  CHECK(tape.value(unmasked).at(0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("stage 1 moves only the trained branch") {
  const Dataset s0 = generate_domain(tiny_spec("s0", -1.0), 51);
  const Dataset s1 = generate_domain(tiny_spec("s1", 1.0), 52);
  EIFModel model = trained_fixture({s0, s1}, 53);

  const auto before_b1 = snapshot(model.params(), model.branch_param_indices(1));
  const auto before_cross = snapshot(model.params(), model.cross_param_indices());
  const auto before_b0 = snapshot(model.params(), model.branch_param_indices(0));

  TrainConfig cfg;
  cfg.stage1_batches = 30;
  cfg.batch_size = 16;
  cfg.seed = 5;
  const std::vector<TraceRow> trace = train_stage1(model, 0, s0, cfg);
  CHECK(trace.size() == 30);
  CHECK(trace.front().batch == 0);
  CHECK(trace.back().batch == 29);

  CHECK_FALSE(bit_equal(before_b0, snapshot(model.params(), model.branch_param_indices(0))));
  CHECK(bit_equal(before_b1, snapshot(model.params(), model.branch_param_indices(1))));
  CHECK(bit_equal(before_cross, snapshot(model.params(), model.cross_param_indices())));
}

TEST_CASE("stage 2 freeze keeps branch backbones bit-identical") {
  const Dataset s0 = generate_domain(tiny_spec("s0", -1.0), 61);
  const Dataset s1 = generate_domain(tiny_spec("s1", 1.0), 62);
  EIFModel model = trained_fixture({s0, s1}, 63);

  TrainConfig cfg;
  cfg.stage2_batches = 25;
  cfg.batch_size = 16;
  cfg.seed = 7;
  cfg.freeze_backbones_stage2 = true;

  const auto before_b0 = snapshot(model.params(), model.branch_param_indices(0));
  const auto before_b1 = snapshot(model.params(), model.branch_param_indices(1));
  const auto before_cross = snapshot(model.params(), model.cross_param_indices());
  const std::vector<TraceRow> trace = train_stage2(model, {s0, s1}, cfg);
  CHECK(trace.size() == 25);
  CHECK(bit_equal(before_b0, snapshot(model.params(), model.branch_param_indices(0))));
  CHECK(bit_equal(before_b1, snapshot(model.params(), model.branch_param_indices(1))));
  CHECK_FALSE(bit_equal(before_cross, snapshot(model.params(), model.cross_param_indices())));

  // Unfrozen training moves branch parameters too.
  cfg.freeze_backbones_stage2 = false;
  const std::vector<TraceRow> trace2 = train_stage2(model, {s0, s1}, cfg);
  CHECK_FALSE(bit_equal(before_b0, snapshot(model.params(), model.branch_param_indices(0))));
}

TEST_CASE("zero batches leave parameters untouched") {
  const Dataset src = generate_domain(tiny_spec("src", 0.0), 71);
  EIFModel model = trained_fixture({src}, 73);
  const auto before = snapshot(model.params(), model.all_param_indices());
  TrainConfig cfg;
  cfg.stage1_batches = 0;
  cfg.stage2_batches = 0;
  CHECK(train_stage1(model, 0, src, cfg).empty());
  CHECK(train_stage2(model, {src}, cfg).empty());
  CHECK(finetune_adapt(model, src, cfg, 0).empty());
  CHECK(bit_equal(before, snapshot(model.params(), model.all_param_indices())));
}

TEST_CASE("training is deterministic in the config seed") {
  const Dataset src = generate_domain(tiny_spec("src", 0.0), 81);
  TrainConfig cfg;
  cfg.stage1_batches = 20;
  cfg.batch_size = 16;
  cfg.seed = 9;

  EIFModel a = trained_fixture({src}, 83);
  EIFModel b = trained_fixture({src}, 83);
  const std::vector<TraceRow> ta = train_stage1(a, 0, src, cfg);
  const std::vector<TraceRow> tb = train_stage1(b, 0, src, cfg);
  REQUIRE(ta.size() == tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) {
    CHECK(ta[i].total == tb[i].total);
  }
  CHECK(bit_equal(snapshot(a.params(), a.all_param_indices()),
                  snapshot(b.params(), b.all_param_indices())));
}

TEST_CASE("finetune_adapt reduces loss on the adaptation pool") {
  const Dataset s0 = generate_domain(tiny_spec("s0", -1.0), 91);
  const Dataset s1 = generate_domain(tiny_spec("s1", 1.0), 92);
  EIFModel model = trained_fixture({s0, s1}, 93);
  DomainSpec pool_spec = tiny_spec("pool", 0.0);
  pool_spec.sample_count = 100;
  const Dataset pool = generate_domain(pool_spec, 94);

  TrainConfig cfg;
  cfg.batch_size = 25;
  cfg.seed = 11;
  cfg.learning_rate = 3e-3;  // fast enough for visible descent in 120 steps
  const Metrics before = evaluate(model, pool);
  const std::vector<TraceRow> trace = finetune_adapt(model, pool, cfg, 120);
  REQUIRE(trace.size() == 120);
  const Metrics after = evaluate(model, pool);
  CHECK(after.euclidean < before.euclidean);
  // Loss trend: the last quarter improves on the first quarter.
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 30; ++i) {
    head += trace[static_cast<std::size_t>(i)].total;
    tail += trace[trace.size() - 1 - static_cast<std::size_t>(i)].total;
  }
  CHECK(tail < head);
}

TEST_CASE("metrics fields are internally consistent") {
  const Dataset src = generate_domain(tiny_spec("src", 0.0), 95);
  EIFModel model = trained_fixture({src}, 96);
  const Metrics m = evaluate(model, src);
  REQUIRE(m.mae.size() == 2);
  CHECK(m.samples == src.size());
  CHECK(m.mae[0] >= 0.0);
  CHECK(m.mae[1] >= 0.0);
  // Euclidean error dominates each component MAE and is bounded by the sum.
  CHECK(m.euclidean >= std::max(m.mae[0], m.mae[1]) - 1e-12);
  CHECK(m.euclidean <= m.mae[0] + m.mae[1] + 1e-12);
  CHECK(m.mean_aleatoric > 0.0);
  CHECK(m.mean_epistemic > 0.0);

  // Average fusion and cross-only views exist and score the same samples.
  CHECK(evaluate_average_fusion(model, src).samples == src.size());
  CHECK(evaluate_cross_only(model, src).samples == src.size());
  model.set_cross_enabled(false);
  CHECK_THROWS_AS(evaluate_cross_only(model, src), PreconditionError);
}

TEST_CASE("train config validation names offending fields") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lambda = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.stage1_batches = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
