#pragma once

#include <vector>

#include "branchtopo/common.hpp"

namespace branchtopo::cluster {

struct ClusterResult {
  PointArray centers;
  std::vector<int> assignment;  // center index per input point
};

// Flat-kernel mean-shift. Seeds come from a bandwidth/2 grid-binned subsample
// of the points; converged modes closer than bandwidth/2 merge (higher
// support wins, ties by coordinate order); every point is assigned to its
// nearest surviving center.
ClusterResult mean_shift(const PointArray& points, double bandwidth, double tol = 1e-4,
                         int max_iter = 200);

// Instance labels from embeddings: points predicted padding get -1, the rest
// are mean-shift clusters of their embeddings with bandwidth delta_v.
std::vector<int> extract_instances(const PointArray& embeddings,
                                   const std::vector<int>& predicted_class,
                                   double delta_v = 0.7);

// Cluster centers of the points predicted end-point, in coordinate space.
PointArray localize_junctions(const PointArray& coords, const std::vector<int>& predicted_class,
                              double bandwidth_xy = 0.02);

}  // namespace branchtopo::cluster
