#include <cmath>
#include <cstdint>
#include <vector>

#include <doctest.h>

#include "evifuse/errors.hpp"
#include "evifuse/model.hpp"
#include "evifuse/rng.hpp"

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

std::vector<PartitionSpec> make_partitions(const NetworkConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> labels(200);
  std::vector<PartitionSpec> parts;
  for (int c = 0; c < cfg.output_components; ++c) {
    for (double& v : labels) v = rng.normal(0.2 * c, 1.0 + 0.3 * c);
    parts.push_back(build_partition(labels, cfg.group_count, cfg.overlap));
  }
  return parts;
}

EIFModel ready_model(const NetworkConfig& cfg, int branches, std::uint64_t seed) {
  std::vector<std::string> ids;
  for (int b = 0; b < branches; ++b) ids.push_back("src" + std::to_string(b));
  EIFModel model(cfg, ids);
  model.init_params(seed);
  for (int b = 0; b < branches; ++b) {
    model.set_branch_partitions(b, make_partitions(cfg, seed + static_cast<std::uint64_t>(b)));
  }
  model.set_cross_partitions(make_partitions(cfg, seed + 100));
  return model;
}

Tensor random_inputs(std::uint64_t seed, std::size_t n, int dim) {
  Rng rng(seed);
  Tensor x = Tensor::zeros({n, static_cast<std::size_t>(dim)});
  for (double& v : x.values) v = rng.normal(0.0, 1.0);
  return x;
}

bool params_equal(const ParameterStore& a, const ParameterStore& b) {
  if (a.count() != b.count()) return false;
  for (std::size_t i = 0; i < a.count(); ++i) {
    const Parameter& pa = a.at(static_cast<int>(i));
    const Parameter& pb = b.at(static_cast<int>(i));
    if (pa.name != pb.name || pa.value.shape != pb.value.shape) return false;
    for (std::size_t k = 0; k < pa.value.size(); ++k) {
      if (pa.value.values[k] != pb.value.values[k]) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("initialization is deterministic in the seed") {
  const NetworkConfig cfg = small_config();
  EIFModel a(cfg, {"s0", "s1"});
  EIFModel b(cfg, {"s0", "s1"});
  a.init_params(77);
  b.init_params(77);
  CHECK(params_equal(a.params(), b.params()));

  EIFModel c(cfg, {"s0", "s1"});
  c.init_params(78);
  CHECK_FALSE(params_equal(a.params(), c.params()));
}

TEST_CASE("forward is deterministic and outputs stay in the NIG domain") {
  EIFModel model = ready_model(small_config(), 2, 5);
  const Tensor x = random_inputs(9, 17, 2);
  const EifForwardResult r1 = model.forward(x);
  const EifForwardResult r2 = model.forward(x);
  REQUIRE(r1.fused.size() == 2);
  for (std::size_t c = 0; c < r1.fused.size(); ++c) {
    REQUIRE(r1.fused[c].size() == 17);
    for (std::size_t i = 0; i < r1.fused[c].size(); ++i) {
      const NIGParams& p = r1.fused[c][i];
      CHECK(p.gamma > 0.0);
      CHECK(p.alpha > 1.0);
      CHECK(p.beta > 0.0);
      CHECK(p.delta == r2.fused[c][i].delta);
      CHECK(p.gamma == r2.fused[c][i].gamma);
      CHECK(p.alpha == r2.fused[c][i].alpha);
      CHECK(p.beta == r2.fused[c][i].beta);
      const UncertaintyReport& u = r1.report[c][i];
      CHECK(u.prediction == p.delta);
      CHECK(u.aleatoric == doctest::Approx(p.beta / (p.alpha - 1.0)).epsilon(1e-12));
      CHECK(u.epistemic ==
            doctest::Approx(p.beta / (p.gamma * (p.alpha - 1.0))).epsilon(1e-12));
    }
  }
}

TEST_CASE("diagnostics weights are normalized shares") {
  EIFModel model = ready_model(small_config(), 2, 13);
  const Tensor x = random_inputs(3, 9, 2);
  const EifForwardResult r = model.forward(x, true);
  const ForwardDiagnostics& d = r.diag;

  REQUIRE(d.branch_weights.size() == 2);  // components
  for (const auto& comp : d.branch_weights) {
    REQUIRE(comp.size() == 9);
    for (const auto& row : comp) {
      REQUIRE(row.size() == 3);  // 2 branches + cross
      double sum = 0.0;
      for (double w : row) {
        CHECK(w >= 0.0);
        sum += w;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
  }

  REQUIRE(d.regressor_weights.size() == 3);  // candidates
  for (const auto& cand : d.regressor_weights) {
    REQUIRE(cand.size() == 2);
    for (const auto& comp : cand) {
      REQUIRE(comp.size() == 9);
      for (const auto& row : comp) {
        REQUIRE(row.size() == 3);  // groups
        double sum = 0.0;
        for (double w : row) {
          CHECK(w >= 0.0);
          sum += w;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
      }
    }
  }

  REQUIRE(d.branch_fused.size() == 3);
  // Fused output is the cross-candidate fusion of the per-candidate beliefs.
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < 9; ++i) {
      std::vector<NIGParams> cands;
      for (std::size_t k = 0; k < d.branch_fused.size(); ++k) {
        cands.push_back(d.branch_fused[k][c][i]);
      }
      const NIGParams ref = monig_fuse(cands);
      CHECK(r.fused[c][i].delta == doctest::Approx(ref.delta).epsilon(1e-12));
      CHECK(r.fused[c][i].gamma == doctest::Approx(ref.gamma).epsilon(1e-12));
      CHECK(r.fused[c][i].alpha == doctest::Approx(ref.alpha).epsilon(1e-12));
      CHECK(r.fused[c][i].beta == doctest::Approx(ref.beta).epsilon(1e-12));
    }
  }
}

TEST_CASE("disabling the cross branch drops one candidate") {
  EIFModel model = ready_model(small_config(), 2, 21);
  const Tensor x = random_inputs(4, 5, 2);
  model.set_cross_enabled(false);
  const EifForwardResult r = model.forward(x, true);
  CHECK(r.diag.branch_weights[0][0].size() == 2);
  CHECK(r.diag.branch_fused.size() == 2);
  model.set_cross_enabled(true);
  const EifForwardResult r2 = model.forward(x, true);
  CHECK(r2.diag.branch_fused.size() == 3);
}

TEST_CASE("single branch without cross passes through inter fusion unchanged") {
  NetworkConfig cfg = small_config();
  EIFModel model = ready_model(cfg, 1, 3);
  model.set_cross_enabled(false);
  const Tensor x = random_inputs(6, 7, 2);
  const BranchForwardResult branch = model.branch_forward(0, x);
  const EifForwardResult full = model.forward(x);
  for (std::size_t c = 0; c < branch.fused.size(); ++c) {
    for (std::size_t i = 0; i < branch.fused[c].size(); ++i) {
      CHECK(full.fused[c][i].delta == branch.fused[c][i].delta);
      CHECK(full.fused[c][i].gamma == branch.fused[c][i].gamma);
      CHECK(full.fused[c][i].alpha == branch.fused[c][i].alpha);
      CHECK(full.fused[c][i].beta == branch.fused[c][i].beta);
    }
  }
}

TEST_CASE("branch forward matches the intra fusion of its heads") {
  const NetworkConfig cfg = small_config();
  EIFModel model = ready_model(cfg, 2, 31);
  const Tensor x = random_inputs(2, 11, 2);
  const BranchForwardResult out = model.branch_forward(1, x);
  REQUIRE(out.heads.size() == 2);
  for (std::size_t c = 0; c < out.heads.size(); ++c) {
    REQUIRE(out.heads[c].size() == 3);
    for (std::size_t i = 0; i < 11; ++i) {
      std::vector<NIGParams> heads;
      for (std::size_t g = 0; g < out.heads[c].size(); ++g) {
        heads.push_back(out.heads[c][g][i]);
      }
      const NIGParams ref = monig_fuse(heads);
      CHECK(out.fused[c][i].delta == doctest::Approx(ref.delta).epsilon(1e-12));
      CHECK(out.fused[c][i].beta == doctest::Approx(ref.beta).epsilon(1e-12));
    }
  }
}

TEST_CASE("average fusion is the plain mean of branch deltas") {
  EIFModel model = ready_model(small_config(), 2, 41);
  const Tensor x = random_inputs(8, 6, 2);
  const BranchForwardResult b0 = model.branch_forward(0, x);
  const BranchForwardResult b1 = model.branch_forward(1, x);
  const std::vector<std::vector<double>> avg = model.average_fusion_predict(x);
  REQUIRE(avg.size() == 2);
  for (std::size_t c = 0; c < avg.size(); ++c) {
    for (std::size_t i = 0; i < 6; ++i) {
      const double expect = 0.5 * (b0.fused[c][i].delta + b1.fused[c][i].delta);
      CHECK(avg[c][i] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("parameter index sets partition the store") {
  EIFModel model = ready_model(small_config(), 2, 51);
  const std::vector<int> b0 = model.branch_param_indices(0);
  const std::vector<int> b1 = model.branch_param_indices(1);
  const std::vector<int> cross = model.cross_param_indices();
  const std::vector<int> all = model.all_param_indices();
  CHECK(b0.size() + b1.size() + cross.size() == all.size());
  CHECK(all.size() == model.params().count());
  std::vector<bool> seen(all.size(), false);
  for (const std::vector<int>* set : {&b0, &b1, &cross}) {
    for (int idx : *set) {
      REQUIRE(idx >= 0);
      REQUIRE(static_cast<std::size_t>(idx) < seen.size());
      CHECK_FALSE(seen[static_cast<std::size_t>(idx)]);
      seen[static_cast<std::size_t>(idx)] = true;
    }
  }
}

TEST_CASE("forward requires partitions and matching input width") {
  const NetworkConfig cfg = small_config();
  EIFModel model(cfg, {"s0"});
  model.init_params(1);
  const Tensor x = random_inputs(2, 3, 2);
  CHECK_THROWS_AS(model.forward(x), UsageError);  // partitions not set

  EIFModel ready = ready_model(cfg, 1, 1);
  const Tensor bad = random_inputs(2, 3, 5);
  CHECK_THROWS_AS(ready.forward(bad), StructuralError);
}

TEST_CASE("network config validation") {
  NetworkConfig cfg = small_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.mff_start_layer = 9;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.group_count = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.overlap = 0.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.feature_layer_sizes.clear();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("baseline model prediction shape and determinism") {
  NetworkConfig cfg = small_config();
  BaselineModel model(cfg);
  model.init_params(19);
  const Tensor x = random_inputs(2, 13, 2);
  const std::vector<std::vector<double>> p1 = model.predict(x);
  const std::vector<std::vector<double>> p2 = model.predict(x);
  REQUIRE(p1.size() == 2);
  REQUIRE(p1[0].size() == 13);
  CHECK(p1 == p2);

  BaselineModel again(cfg);
  again.init_params(19);
  CHECK(again.predict(x) == p1);
}
