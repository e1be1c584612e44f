#pragma once

#include <cstddef>
#include <vector>

namespace evifuse {

// One label interval with a representative center. length == right - left.
struct LabelGroup {
  int index = 0;
  double left = 0.0;
  double center = 0.0;
  double right = 0.0;
  double length = 0.0;
};

// Overlapping partition of a label sample into group_count intervals.
// Groups are ordered by index; lefts, centers and rights are nondecreasing
// and the union of intervals covers [min label, max label].
struct PartitionSpec {
  int group_count = 0;
  double overlap = 0.0;
  std::size_t sample_count = 0;
  std::vector<LabelGroup> groups;
};

// Builds the partition from order statistics of `labels`: group g is
// centered on the floor(S*(g+0.5)/G)-th sorted label and reaches the
// floor(S*(g+0.5 -+ overlap/2)/G)-th labels on each side, indices clamped
// to [0, S-1]. overlap >= 1 is required so the intervals tile the range;
// overlap > 1 makes adjacent intervals genuinely overlap.
PartitionSpec build_partition(const std::vector<double>& labels, int group_count,
                              double overlap);

// Indices of every group whose closed interval contains y. A label outside
// the global range maps to the nearest boundary group.
std::vector<int> group_membership(const PartitionSpec& spec, double y);

// Maps a head offset in [-1, 1] to a label: offset * length / 2 + center.
double local_prediction(double offset, const LabelGroup& group);

}  // namespace evifuse
