#include "evifuse/partition.hpp"

#include <algorithm>
#include <cmath>

#include "evifuse/errors.hpp"

namespace evifuse {

namespace {

std::size_t clamped_index(double pos, std::size_t n) {
  const double f = std::floor(pos);
  if (f < 0.0) return 0;
  if (f >= static_cast<double>(n)) return n - 1;
  return static_cast<std::size_t>(f);
}

}  // namespace

PartitionSpec build_partition(const std::vector<double>& labels, int group_count,
                              double overlap) {
  if (labels.empty()) throw PreconditionError("build_partition: empty label set");
  if (group_count < 1) throw PreconditionError("build_partition: group_count must be >= 1");
  if (static_cast<std::size_t>(group_count) > labels.size())
    throw PreconditionError("build_partition: more groups than labels");
  if (!std::isfinite(overlap) || overlap < 1.0)
    throw PreconditionError("build_partition: overlap must be >= 1");
  for (double v : labels) {
    if (!std::isfinite(v)) throw PreconditionError("build_partition: non-finite label");
  }

  std::vector<double> sorted(labels);
  std::sort(sorted.begin(), sorted.end());
  const double s = static_cast<double>(sorted.size());
  const double g_count = static_cast<double>(group_count);

  PartitionSpec spec;
  spec.group_count = group_count;
  spec.overlap = overlap;
  spec.sample_count = sorted.size();
  spec.groups.reserve(static_cast<std::size_t>(group_count));

  for (int g = 0; g < group_count; ++g) {
    const double mid = static_cast<double>(g) + 0.5;
    LabelGroup grp;
    grp.index = g;
    grp.center = sorted[clamped_index(s * mid / g_count, sorted.size())];
    grp.left = sorted[clamped_index(s * (mid - 0.5 * overlap) / g_count, sorted.size())];
    grp.right = sorted[clamped_index(s * (mid + 0.5 * overlap) / g_count, sorted.size())];
    grp.length = grp.right - grp.left;
    spec.groups.push_back(grp);
  }
  return spec;
}

std::vector<int> group_membership(const PartitionSpec& spec, double y) {
  if (spec.groups.empty()) throw PreconditionError("group_membership: empty partition");
  if (!std::isfinite(y)) throw PreconditionError("group_membership: non-finite label");

  if (y < spec.groups.front().left) return {0};
  if (y > spec.groups.back().right) return {spec.group_count - 1};

  std::vector<int> hits;
  for (const LabelGroup& g : spec.groups) {
    if (g.left <= y && y <= g.right) hits.push_back(g.index);
  }
  return hits;
}

double local_prediction(double offset, const LabelGroup& group) {
  if (!std::isfinite(offset)) throw PreconditionError("local_prediction: non-finite offset");
  return offset * group.length * 0.5 + group.center;
}

}  // namespace evifuse
