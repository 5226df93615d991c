#pragma once

#include <vector>

#include "branchtopo/common.hpp"

namespace branchtopo::pts {

// Centroid-major neighbor table. neighbors has centroid_indices.size() * max_k
// entries; underfull balls repeat the centroid's own index.
struct NeighborIndex {
  std::vector<int> centroid_indices;
  int max_k = 0;
  std::vector<int> neighbors;

  int centroid_count() const { return static_cast<int>(centroid_indices.size()); }
  int neighbor(int c, int j) const { return neighbors[static_cast<size_t>(c) * max_k + j]; }
};

// Iterative max-min subsampling. The first pick is the lexicographically
// smallest row; later ties break by coordinate order then index, so the result
// depends only on the coordinate multiset.
std::vector<int> farthest_point_sample(const PointArray& coords, int k);

// Up to max_k nearest points within `radius` of each centroid, nearest first,
// the centroid itself always in slot 0.
NeighborIndex ball_query(const PointArray& coords, const std::vector<int>& centroid_indices,
                         double radius, int max_k);

// Neighbor coordinates relative to their centroid, flattened centroid-major:
// rows K*max_k, cols dim.
std::vector<double> relative_coords(const PointArray& coords, const NeighborIndex& nbr);

// Relative coordinates concatenated with the (unchanged) neighbor features.
// Rows K*max_k, cols dim + feat_cols.
std::vector<double> group_relative(const PointArray& coords, const std::vector<double>& feats,
                                   int feat_cols, const NeighborIndex& nbr);

// Inverse-distance interpolation stencil: for each destination row, up to k
// source rows and normalized weights.
struct InterpPlan {
  int k = 0;
  int n_dst = 0;
  std::vector<int> indices;      // n_dst * k
  std::vector<double> weights;   // n_dst * k, each row sums to 1
};

InterpPlan interpolation_plan(const PointArray& src_coords, const PointArray& dst_coords,
                              int k = 3);

std::vector<double> apply_interpolation(const InterpPlan& plan, const std::vector<double>& src_feats,
                                        int feat_cols);

std::vector<double> interpolate_features(const PointArray& src_coords,
                                         const std::vector<double>& src_feats, int feat_cols,
                                         const PointArray& dst_coords);

}  // namespace branchtopo::pts
