// Microbenchmarks for the hot paths: fusion math, partition construction,
// the value-level forward pass and one full training step. Run via
// ./build/benchmarks/evifuse_bench (built only when google-benchmark is
// installed).

#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "evifuse/model.hpp"
#include "evifuse/nig.hpp"
#include "evifuse/parameters.hpp"
#include "evifuse/partition.hpp"
#include "evifuse/rng.hpp"
#include "evifuse/synth_data.hpp"
#include "evifuse/tape.hpp"
#include "evifuse/training.hpp"

using namespace evifuse;

namespace {

std::vector<NIGParams> random_nigs(std::size_t m, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<NIGParams> out(m);
  for (NIGParams& p : out) {
    p.delta = rng.uniform(-5.0, 5.0);
    p.gamma = rng.uniform(0.1, 5.0);
    p.alpha = rng.uniform(1.1, 6.0);
    p.beta = rng.uniform(0.1, 5.0);
  }
  return out;
}

void BM_MonigFuse(benchmark::State& state) {
  const auto in = random_nigs(static_cast<std::size_t>(state.range(0)), 3);
  for (auto _ : state) benchmark::DoNotOptimize(monig_fuse(in));
}
BENCHMARK(BM_MonigFuse)->Arg(2)->Arg(4)->Arg(16);

void BM_EvidentialLossGrad(benchmark::State& state) {
  const auto in = random_nigs(64, 4);
  for (auto _ : state) {
    for (const NIGParams& p : in)
      benchmark::DoNotOptimize(evidential_loss_grad(p, 0.7, 0.01));
  }
}
BENCHMARK(BM_EvidentialLossGrad);

void BM_BuildPartition(benchmark::State& state) {
  Rng rng(9);
  std::vector<double> labels(static_cast<std::size_t>(state.range(0)));
  for (double& v : labels) v = rng.normal(0.0, 2.0);
  for (auto _ : state) benchmark::DoNotOptimize(build_partition(labels, 4, 1.5));
}
BENCHMARK(BM_BuildPartition)->Arg(1000)->Arg(10000);

// Shared fixture: the default two-branch model with partitions from a
// small generated source, plus one assembled batch.
struct ModelFixture {
  NetworkConfig net;
  EIFModel model;
  Dataset data;
  BatchData batch;

  explicit ModelFixture(int batch_size)
      : net(), model(net, {"a", "b"}), data(make_benchmark(2).sources[1]) {
    model.init_params(17);
    std::vector<PartitionSpec> parts;
    for (int c = 0; c < net.output_components; ++c)
      parts.push_back(build_partition(data.component_labels(c), net.group_count, net.overlap));
    model.set_branch_partitions(0, parts);
    model.set_branch_partitions(1, parts);
    model.set_cross_partitions(parts);
    Rng rng(33);
    const std::vector<const Dataset*> sets = {&data};
    batch = assemble_batch(sets, balanced_batch(sets, batch_size, rng));
  }
};

void BM_ForwardPass(benchmark::State& state) {
  ModelFixture fx(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(fx.model.forward(fx.batch.x));
}
BENCHMARK(BM_ForwardPass)->Arg(1)->Arg(64);

void BM_Stage1TrainStep(benchmark::State& state) {
  ModelFixture fx(64);
  AdamOptimizer opt(fx.model.params(), {1e-4, 0.9, 0.999, 1e-8},
                    fx.model.branch_param_indices(0));
  for (auto _ : state) {
    Tape tape;
    GraphSession session(tape, fx.model.params());
    const Stage1LossIds ids = stage1_loss_graph(fx.model, tape, session, 0, fx.batch, 0.01);
    tape.backward(ids.total);
    session.accumulate_gradients(fx.model.params());
    fx.model.params().clip_grads(10.0);
    opt.step(fx.model.params());
  }
}
BENCHMARK(BM_Stage1TrainStep);

void BM_Stage2TrainStep(benchmark::State& state) {
  ModelFixture fx(64);
  AdamOptimizer opt(fx.model.params(), {1e-4, 0.9, 0.999, 1e-8});
  for (auto _ : state) {
    Tape tape;
    GraphSession session(tape, fx.model.params());
    const Stage2LossIds ids = stage2_loss_graph(fx.model, tape, session, fx.batch, 0.01);
    tape.backward(ids.total);
    session.accumulate_gradients(fx.model.params());
    fx.model.params().clip_grads(10.0);
    opt.step(fx.model.params());
  }
}
BENCHMARK(BM_Stage2TrainStep);

}  // namespace

BENCHMARK_MAIN();
