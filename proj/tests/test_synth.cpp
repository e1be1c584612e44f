#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <vector>

#include <doctest.h>

#include "evifuse/errors.hpp"
#include "evifuse/synth_data.hpp"

using namespace evifuse;

namespace {

DomainSpec tiny_spec() {
  DomainSpec spec;
  spec.domain_id = "tiny";
  spec.input_mean = {0.0, 0.5};
  spec.input_spread = {1.0, 0.5};
  spec.targets = {{TargetKind::kSaturatingRamp, {1.0, 0.0, 2.0, 1.0, 0.5}},
                  {TargetKind::kCubicBlend, {0.0, 1.0, 0.1, 0.3, -0.2}}};
  spec.base_sigma = 0.2;
  spec.sample_count = 500;
  return spec;
}

bool datasets_equal(const Dataset& a, const Dataset& b) {
  return a.domain_id == b.domain_id && a.inputs == b.inputs && a.labels == b.labels &&
         a.noise_sigmas == b.noise_sigmas;
}

std::pair<double, double> label_range(const Dataset& ds, int component) {
  const std::vector<double> ys = ds.component_labels(component);
  const auto [lo, hi] = std::minmax_element(ys.begin(), ys.end());
  return {*lo, *hi};
}

double mean_of(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

}  // namespace

TEST_CASE("target function fixtures") {
  const TargetFunction ramp{TargetKind::kSaturatingRamp, {1.0, 0.0, 2.0, 1.0, 0.5}};
  CHECK(ramp.eval({0.0, 9.0}) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(ramp.eval({1.0, 0.0}) == doctest::Approx(2.0 * std::tanh(1.0) + 0.5).epsilon(1e-15));

  const TargetFunction cubic{TargetKind::kCubicBlend, {0.5, 0.5, 2.0, -1.0, 3.0}};
  // t = 1 -> 2 - 1 + 3 = 4.
  CHECK(cubic.eval({1.0, 1.0}) == doctest::Approx(4.0).epsilon(1e-15));

  const TargetFunction sine{TargetKind::kPiecewiseSine, {1.0, 0.0, 0.5, 2.0, 3.0, 1.0}};
  CHECK(sine.eval({1.0, 0.0}) == doctest::Approx(0.5 + 3.0 * std::sin(1.0)).epsilon(1e-15));
  CHECK(sine.eval({-1.0, 0.0}) == doctest::Approx(-0.5 + 2.0 * std::sin(-1.0)).epsilon(1e-15));

  TargetFunction bad = cubic;
  bad.params.pop_back();
  CHECK_THROWS_AS(bad.validate(2), PreconditionError);
}

TEST_CASE("generation is deterministic in the seed") {
  const DomainSpec spec = tiny_spec();
  CHECK(datasets_equal(generate_domain(spec, 3), generate_domain(spec, 3)));
  CHECK_FALSE(datasets_equal(generate_domain(spec, 3), generate_domain(spec, 4)));
}

TEST_CASE("zero noise reproduces the target functions exactly") {
  DomainSpec spec = tiny_spec();
  spec.base_sigma = 0.0;
  spec.noise_regions.clear();
  const Dataset ds = generate_domain(spec, 11);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t d = 0; d < 2; ++d) {
      CHECK(ds.labels[i][d] == spec.targets[d].eval(ds.inputs[i]));
    }
    CHECK(ds.noise_sigmas[i] == 0.0);
  }
}

TEST_CASE("label bias shifts every label by the domain constant") {
  DomainSpec spec = tiny_spec();
  spec.base_sigma = 0.0;
  spec.label_bias = {0.7, -0.3};
  const Dataset ds = generate_domain(spec, 11);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(ds.labels[i][0] ==
          doctest::Approx(spec.targets[0].eval(ds.inputs[i]) + 0.7).epsilon(1e-15));
    CHECK(ds.labels[i][1] ==
          doctest::Approx(spec.targets[1].eval(ds.inputs[i]) - 0.3).epsilon(1e-15));
  }
}

TEST_CASE("sample moments track the spec") {
  DomainSpec spec = tiny_spec();
  spec.sample_count = 20000;
  const Dataset ds = generate_domain(spec, 5);
  for (std::size_t j = 0; j < 2; ++j) {
    std::vector<double> col;
    col.reserve(ds.size());
    for (const auto& x : ds.inputs) col.push_back(x[j]);
    const double m = mean_of(col);
    const double tol = 4.0 * spec.input_spread[j] / std::sqrt(20000.0);
    CHECK(std::abs(m - spec.input_mean[j]) < tol);
  }
}

TEST_CASE("noise regions select the per-sample sigma, first match wins") {
  DomainSpec spec = tiny_spec();
  spec.noise_regions = {{0, -1e30, 0.0, 0.05}, {0, -1.0, 2.0, 0.4}};
  const Dataset ds = generate_domain(spec, 7);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double x0 = ds.inputs[i][0];
    double expect = spec.base_sigma;
    if (x0 < 0.0) {
      expect = 0.05;  // first region shadows the second on [-1, 0)
    } else if (x0 < 2.0) {
      expect = 0.4;
    }
    CHECK(ds.noise_sigmas[i] == expect);
    CHECK(ds.noise_sigmas[i] == spec.sigma_at(ds.inputs[i]));
  }
}

TEST_CASE("label clipping bounds the outputs") {
  DomainSpec spec = tiny_spec();
  spec.label_clip = {{-0.5, 0.5}};
  const Dataset ds = generate_domain(spec, 13);
  for (const auto& row : ds.labels) {
    for (double y : row) {
      CHECK(y >= -0.5);
      CHECK(y <= 0.5);
    }
  }
}

TEST_CASE("benchmark structure and shift properties") {
  const Benchmark bench = make_benchmark(1);
  REQUIRE(bench.sources.size() == 2);
  REQUIRE(bench.source_tests.size() == 2);
  REQUIRE(bench.targets.size() == 2);
  CHECK(bench.sources[0].size() == 8000);
  CHECK(bench.sources[1].size() == 4000);
  CHECK(bench.sources[0].size() > bench.sources[1].size());
  for (const Dataset& t : bench.targets) CHECK(t.size() == 2000);
  CHECK(bench.ood.size() == 2000);
  for (const Dataset& d : bench.sources) {
    CHECK(d.input_dim() == 2);
    CHECK(d.components() == 2);
  }
  CHECK(bench.source_tests[0].domain_id == bench.sources[0].domain_id + "_test");
  CHECK(bench.source_tests[1].domain_id == bench.sources[1].domain_id + "_test");
  // Test sets are fresh draws, not subsets.
  CHECK(bench.source_tests[0].inputs[0] != bench.sources[0].inputs[0]);

  for (int c = 0; c < 2; ++c) {
    const auto [s0_lo, s0_hi] = label_range(bench.sources[0], c);
    const auto [s1_lo, s1_hi] = label_range(bench.sources[1], c);
    // The source label ranges overlap but neither contains the other.
    CHECK(std::max(s0_lo, s1_lo) < std::min(s0_hi, s1_hi));
    CHECK(s0_lo != s1_lo);
    CHECK(s0_hi != s1_hi);
    // Each target's label range sits strictly inside both source ranges.
    for (const Dataset& t : bench.targets) {
      const auto [t_lo, t_hi] = label_range(t, c);
      CHECK(t_lo > std::min(s0_lo, s1_lo));
      CHECK(t_hi < std::max(s0_hi, s1_hi));
    }
  }

  // Target input means sit away from both source means: for each target
  // and source there is a coordinate further than one source spread out.
  std::vector<std::vector<double>> source_means, source_spreads;
  for (const Dataset& s : bench.sources) {
    std::vector<double> m(2), sd(2);
    for (std::size_t j = 0; j < 2; ++j) {
      std::vector<double> col;
      for (const auto& x : s.inputs) col.push_back(x[j]);
      m[j] = mean_of(col);
      double var = 0.0;
      for (double v : col) var += (v - m[j]) * (v - m[j]);
      sd[j] = std::sqrt(var / static_cast<double>(col.size()));
    }
    source_means.push_back(m);
    source_spreads.push_back(sd);
  }
  for (const Dataset& t : bench.targets) {
    std::vector<double> tm(2);
    for (std::size_t j = 0; j < 2; ++j) {
      std::vector<double> col;
      for (const auto& x : t.inputs) col.push_back(x[j]);
      tm[j] = mean_of(col);
    }
    for (std::size_t s = 0; s < 2; ++s) {
      double max_gap = 0.0;
      for (std::size_t j = 0; j < 2; ++j) {
        max_gap = std::max(max_gap, std::abs(tm[j] - source_means[s][j]) / source_spreads[s][j]);
      }
      CHECK(max_gap > 1.0);
    }
  }

  // The probe domain is far outside every source cloud.
  for (std::size_t j = 0; j < 2; ++j) {
    std::vector<double> col;
    for (const auto& x : bench.ood.inputs) col.push_back(x[j]);
    const double m = mean_of(col);
    for (std::size_t s = 0; s < 2; ++s) {
      CHECK(std::abs(m - source_means[s][j]) > 3.0 * source_spreads[s][j]);
    }
  }

  // Labels are denser in some regions than others: compare occupancy of
  // equal-width histogram bins.
  for (const Dataset& s : bench.sources) {
    const std::vector<double> ys = s.component_labels(0);
    const auto [lo, hi] = std::minmax_element(ys.begin(), ys.end());
    const int bins = 10;
    std::vector<int> counts(bins, 0);
    for (double y : ys) {
      int b = static_cast<int>((y - *lo) / (*hi - *lo) * bins);
      b = std::clamp(b, 0, bins - 1);
      ++counts[static_cast<std::size_t>(b)];
    }
    const auto [min_c, max_c] = std::minmax_element(counts.begin(), counts.end());
    CHECK(*max_c > 3 * std::max(1, *min_c));
  }

  // Per-sample sigma differs across the input plane inside each source.
  for (const Dataset& s : bench.sources) {
    const auto [lo, hi] = std::minmax_element(s.noise_sigmas.begin(), s.noise_sigmas.end());
    CHECK(*hi > 2.0 * *lo);
  }
}

TEST_CASE("default_benchmark matches make_benchmark") {
  const Benchmark bench = make_benchmark(2);
  const auto [sources, targets] = default_benchmark(2);
  REQUIRE(sources.size() == bench.sources.size());
  REQUIRE(targets.size() == bench.targets.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    CHECK(datasets_equal(sources[i], bench.sources[i]));
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    CHECK(datasets_equal(targets[i], bench.targets[i]));
  }
}

TEST_CASE("stage split is disjoint, ordered and deterministic") {
  DomainSpec spec = tiny_spec();
  spec.sample_count = 103;
  const Dataset ds = generate_domain(spec, 17);
  const auto [a, b] = split_for_stages(ds, {4, 1}, 99);
  CHECK(a.size() == 82);  // floor(103 * 4 / 5)
  CHECK(b.size() == 21);
  CHECK(a.domain_id == ds.domain_id);

  // Every row appears exactly once across the two parts.
  std::vector<std::vector<double>> all;
  for (const auto& x : a.inputs) all.push_back(x);
  for (const auto& x : b.inputs) all.push_back(x);
  std::vector<std::vector<double>> orig = ds.inputs;
  std::sort(all.begin(), all.end());
  std::sort(orig.begin(), orig.end());
  CHECK(all == orig);

  // Ascending original order within each part: labels follow their inputs.
  const auto index_of = [&](const std::vector<double>& x) {
    for (std::size_t i = 0; i < ds.inputs.size(); ++i)
      if (ds.inputs[i] == x) return i;
    return ds.inputs.size();
  };
  for (std::size_t i = 1; i < a.size(); ++i) {
    CHECK(index_of(a.inputs[i - 1]) < index_of(a.inputs[i]));
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.labels[i] == ds.labels[index_of(a.inputs[i])]);
  }

  const auto [a2, b2] = split_for_stages(ds, {4, 1}, 99);
  CHECK(datasets_equal(a, a2));
  CHECK(datasets_equal(b, b2));
  const auto [a3, b3] = split_for_stages(ds, {4, 1}, 100);
  CHECK_FALSE(datasets_equal(a, a3));
}

TEST_CASE("dataset subset and input tensor") {
  DomainSpec spec = tiny_spec();
  spec.sample_count = 10;
  const Dataset ds = generate_domain(spec, 23);
  const Dataset sub = dataset_subset(ds, {7, 2, 2});
  REQUIRE(sub.size() == 3);
  CHECK(sub.inputs[0] == ds.inputs[7]);
  CHECK(sub.inputs[1] == ds.inputs[2]);
  CHECK(sub.inputs[2] == ds.inputs[2]);
  CHECK(sub.labels[0] == ds.labels[7]);
  CHECK(sub.noise_sigmas[0] == ds.noise_sigmas[7]);

  const Tensor x = input_tensor(ds);
  REQUIRE(x.shape == std::vector<std::size_t>({10, 2}));
  CHECK(x.at(7, 1) == ds.inputs[7][1]);
  const Tensor xs = input_tensor(ds, {7, 2});
  REQUIRE(xs.rows() == 2);
  CHECK(xs.at(0, 0) == ds.inputs[7][0]);
}

TEST_CASE("dataset text round-trip is exact") {
  DomainSpec spec = tiny_spec();
  spec.sample_count = 64;
  const Dataset ds = generate_domain(spec, 29);

  std::stringstream buf;
  write_dataset(ds, buf);
  std::string header;
  std::getline(buf, header);
  CHECK(header == "evifuse-dataset v1");
  buf.seekg(0);
  const Dataset back = read_dataset(buf);
  CHECK(datasets_equal(ds, back));

  const std::string path = "/tmp/evifuse_test_roundtrip.csv";
  write_dataset_file(ds, path);
  const Dataset from_file = read_dataset_file(path);
  CHECK(datasets_equal(ds, from_file));
  std::remove(path.c_str());

  std::stringstream bad("not-a-header\n");
  CHECK_THROWS_AS(read_dataset(bad), LoadError);
}

TEST_CASE("spec validation rejects malformed domains") {
  DomainSpec spec = tiny_spec();
  spec.input_spread[0] = 0.0;
  CHECK_THROWS_AS(generate_domain(spec, 1), PreconditionError);
  spec = tiny_spec();
  spec.label_bias = {0.1};
  CHECK_THROWS_AS(generate_domain(spec, 1), PreconditionError);
  spec = tiny_spec();
  spec.label_clip = {{1.0, -1.0}};
  CHECK_THROWS_AS(generate_domain(spec, 1), PreconditionError);
  spec = tiny_spec();
  spec.sample_count = 0;
  CHECK_THROWS_AS(generate_domain(spec, 1), PreconditionError);
}
