#include <algorithm>
#include <cmath>
#include <vector>

#include <doctest.h>

#include "evifuse/errors.hpp"
#include "evifuse/partition.hpp"
#include "evifuse/rng.hpp"

using namespace evifuse;

namespace {

std::vector<double> sorted_copy(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v;
}

// Order-statistic index floor(S * q / G) clamped to [0, S-1].
std::size_t stat_index(std::size_t s, double q, int g) {
  const double raw = std::floor(static_cast<double>(s) * q / static_cast<double>(g));
  const double clamped = std::max(0.0, std::min(raw, static_cast<double>(s) - 1.0));
  return static_cast<std::size_t>(clamped);
}

}  // namespace

TEST_CASE("two groups, overlap 2: fixture computed by hand") {
  // Sorted: 0 1 2 3 4 5 6 7, S=8, G=2.
  const std::vector<double> labels = {5, 2, 7, 0, 3, 6, 1, 4};
  const PartitionSpec spec = build_partition(labels, 2, 2.0);
  REQUIRE(spec.groups.size() == 2);
  CHECK(spec.group_count == 2);
  CHECK(spec.overlap == 2.0);
  CHECK(spec.sample_count == 8);

  // Group 0: center idx floor(8*0.5/2)=2 -> 2; left idx floor(8*(-0.5)/2)=-2
  // clamped 0 -> 0; right idx floor(8*1.5/2)=6 -> 6.
  CHECK(spec.groups[0].left == 0.0);
  CHECK(spec.groups[0].center == 2.0);
  CHECK(spec.groups[0].right == 6.0);
  CHECK(spec.groups[0].length == 6.0);
  // Group 1: center idx floor(8*1.5/2)=6 -> 6; left idx floor(8*0.5/2)=2 -> 2;
  // right idx floor(8*2.5/2)=10 clamped 7 -> 7.
  CHECK(spec.groups[1].left == 2.0);
  CHECK(spec.groups[1].center == 6.0);
  CHECK(spec.groups[1].right == 7.0);
  CHECK(spec.groups[1].length == 5.0);
}

TEST_CASE("four groups, overlap 1: tiles without overlap") {
  // Sorted: 0..11, S=12, G=4.
  std::vector<double> labels(12);
  for (int i = 0; i < 12; ++i) labels[static_cast<std::size_t>(i)] = 11 - i;
  const PartitionSpec spec = build_partition(labels, 4, 1.0);
  REQUIRE(spec.groups.size() == 4);
  // Centers: floor(12*(g+0.5)/4) = 1, 4, 7, 10.
  // Bounds: floor(12*g/4) and floor(12*(g+1)/4) -> 0/3, 3/6, 6/9, 9/11(clamp).
  const double expect[4][3] = {{0, 1, 3}, {3, 4, 6}, {6, 7, 9}, {9, 10, 11}};
  for (int g = 0; g < 4; ++g) {
    const LabelGroup& grp = spec.groups[static_cast<std::size_t>(g)];
    CHECK(grp.index == g);
    CHECK(grp.left == expect[g][0]);
    CHECK(grp.center == expect[g][1]);
    CHECK(grp.right == expect[g][2]);
  }
  // Adjacent intervals share exactly their boundary point.
  for (int g = 0; g + 1 < 4; ++g) {
    CHECK(spec.groups[static_cast<std::size_t>(g)].right ==
          spec.groups[static_cast<std::size_t>(g + 1)].left);
  }
}

TEST_CASE("partition matches the order-statistic definition on random data") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t s = 50 + rng.below(500);
    std::vector<double> labels(s);
    for (double& v : labels) v = rng.normal(0.0, 2.0) + rng.uniform(-1.0, 1.0);
    const int g_count = 2 + static_cast<int>(rng.below(7));
    const double overlap = 1.0 + rng.uniform(0.0, 1.5);
    const PartitionSpec spec = build_partition(labels, g_count, overlap);
    const std::vector<double> sorted = sorted_copy(labels);
    REQUIRE(spec.groups.size() == static_cast<std::size_t>(g_count));
    for (int g = 0; g < g_count; ++g) {
      const LabelGroup& grp = spec.groups[static_cast<std::size_t>(g)];
      const double mid = g + 0.5;
      CHECK(grp.center == sorted[stat_index(s, mid, g_count)]);
      CHECK(grp.left == sorted[stat_index(s, mid - overlap / 2.0, g_count)]);
      CHECK(grp.right == sorted[stat_index(s, mid + overlap / 2.0, g_count)]);
      CHECK(grp.length == grp.right - grp.left);
    }
  }
}

TEST_CASE("coverage and monotonicity on 10k labels") {
  Rng rng(97);
  std::vector<double> labels(10000);
  for (double& v : labels) v = rng.normal(0.5, 1.7);
  const double lo = *std::min_element(labels.begin(), labels.end());
  const double hi = *std::max_element(labels.begin(), labels.end());

  for (const int g_count : {4, 8}) {
    for (const double overlap : {1.5, 2.0}) {
      const PartitionSpec spec = build_partition(labels, g_count, overlap);
      CHECK(spec.groups.front().left == lo);
      CHECK(spec.groups.back().right == hi);
      for (std::size_t g = 1; g < spec.groups.size(); ++g) {
        CHECK(spec.groups[g].left >= spec.groups[g - 1].left);
        CHECK(spec.groups[g].center >= spec.groups[g - 1].center);
        CHECK(spec.groups[g].right >= spec.groups[g - 1].right);
        // No gaps: each interval starts no later than the previous ends.
        CHECK(spec.groups[g].left <= spec.groups[g - 1].right);
      }
      // Every label lands in at least one group.
      for (const double y : labels) {
        REQUIRE_FALSE(group_membership(spec, y).empty());
      }
      // Mean membership multiplicity tracks the nominal overlap factor.
      double total = 0.0;
      for (const double y : labels) {
        total += static_cast<double>(group_membership(spec, y).size());
      }
      const double mean_multiplicity = total / static_cast<double>(labels.size());
      CHECK(std::abs(mean_multiplicity - overlap) < 0.3);
    }
  }
}

TEST_CASE("labels outside the range map to the boundary groups") {
  const std::vector<double> labels = {0, 1, 2, 3, 4, 5, 6, 7};
  const PartitionSpec spec = build_partition(labels, 4, 1.5);
  const std::vector<int> low = group_membership(spec, -100.0);
  REQUIRE(low.size() == 1);
  CHECK(low[0] == 0);
  const std::vector<int> high = group_membership(spec, 100.0);
  REQUIRE(high.size() == 1);
  CHECK(high[0] == 3);
}

TEST_CASE("membership is exactly the set of covering intervals") {
  Rng rng(5);
  std::vector<double> labels(400);
  for (double& v : labels) v = rng.uniform(-3.0, 3.0);
  const PartitionSpec spec = build_partition(labels, 6, 1.8);
  for (int i = 0; i < 500; ++i) {
    const double y = rng.uniform(-3.0, 3.0);
    const std::vector<int> got = group_membership(spec, y);
    std::vector<int> expect;
    for (const LabelGroup& g : spec.groups) {
      if (y >= g.left && y <= g.right) expect.push_back(g.index);
    }
    if (expect.empty()) continue;  // outside-range fallback tested above
    REQUIRE(got == expect);
  }
}

TEST_CASE("local prediction maps offsets through the group geometry") {
  const LabelGroup g{2, -1.0, 0.5, 3.0, 4.0};
  CHECK(local_prediction(0.0, g) == 0.5);
  CHECK(local_prediction(1.0, g) == 2.5);
  CHECK(local_prediction(-1.0, g) == -1.5);
  CHECK(local_prediction(0.25, g) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("partition input validation") {
  const std::vector<double> labels = {0, 1, 2, 3};
  CHECK_THROWS_AS(build_partition({}, 2, 1.5), PreconditionError);
  CHECK_THROWS_AS(build_partition(labels, 0, 1.5), PreconditionError);
  CHECK_THROWS_AS(build_partition(labels, -2, 1.5), PreconditionError);
  CHECK_THROWS_AS(build_partition(labels, 2, 0.8), PreconditionError);
}
