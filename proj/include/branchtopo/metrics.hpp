#pragma once

#include <vector>

#include "branchtopo/common.hpp"

namespace branchtopo::metrics {

// Symmetric Best Dice between two instance labelings over the same points.
// Rows where the ground-truth label is negative (padding) are ignored;
// negative predicted labels count as unassigned. Score in [0, 100]; either
// side empty gives 0.
double sbd(const std::vector<int>& pred_labels, const std::vector<int>& gt_labels);

// Mean absolute difference in per-structure instance counts.
double dic(const std::vector<int>& pred_counts, const std::vector<int>& gt_counts);

struct DscResult {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  double score = 0.0;   // 100 * 2tp / (2tp + fp + fn)
  bool vacuous = false; // both center lists empty
};

// Greedy one-to-one center matching by ascending distance within match_radius.
DscResult ds_c(const PointArray& pred_centers, const PointArray& gt_centers, double match_radius);

}  // namespace branchtopo::metrics
