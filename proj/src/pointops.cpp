#include "branchtopo/pointops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace branchtopo::pts {
namespace {

// Candidate ordering shared by ball_query and interpolation_plan: distance,
// then coordinates, then index. Keeps every op a function of the coordinate
// multiset rather than the input row order.
struct Candidate {
  double d2;
  int idx;
};

bool candidate_less(const Candidate& a, const Candidate& b, const PointArray& coords) {
  if (a.d2 != b.d2) return a.d2 < b.d2;
  const int c = compare_rows(coords.row(a.idx), coords.row(b.idx), coords.dim);
  if (c != 0) return c < 0;
  return a.idx < b.idx;
}

}  // namespace

std::vector<int> farthest_point_sample(const PointArray& coords, int k) {
  const int n = coords.size();
  if (k < 1 || k > n) throw DataError("farthest_point_sample: k out of range");
  const int dim = coords.dim;

  int first = 0;
  for (int i = 1; i < n; ++i) {
    if (compare_rows(coords.row(i), coords.row(first), dim) < 0) first = i;
  }

  std::vector<int> picked;
  picked.reserve(k);
  picked.push_back(first);
  std::vector<double> best(n);
  for (int i = 0; i < n; ++i) best[i] = squared_distance(coords.row(i), coords.row(first), dim);

  while (static_cast<int>(picked.size()) < k) {
    int arg = -1;
    for (int i = 0; i < n; ++i) {
      if (arg < 0) {
        arg = i;
        continue;
      }
      if (best[i] > best[arg]) {
        arg = i;
      } else if (best[i] == best[arg]) {
        const int c = compare_rows(coords.row(i), coords.row(arg), dim);
        if (c < 0 || (c == 0 && i < arg)) arg = i;
      }
    }
    picked.push_back(arg);
    for (int i = 0; i < n; ++i) {
      best[i] = std::min(best[i], squared_distance(coords.row(i), coords.row(arg), dim));
    }
  }
  return picked;
}

NeighborIndex ball_query(const PointArray& coords, const std::vector<int>& centroid_indices,
                         double radius, int max_k) {
  if (radius <= 0.0) throw DataError("ball_query: radius must be > 0");
  if (max_k < 1) throw DataError("ball_query: max_k must be >= 1");
  const int n = coords.size();
  const double r2 = radius * radius;

  NeighborIndex out;
  out.centroid_indices = centroid_indices;
  out.max_k = max_k;
  out.neighbors.reserve(centroid_indices.size() * static_cast<size_t>(max_k));

  std::vector<Candidate> cands;
  for (const int c : centroid_indices) {
    const double* cc = coords.row(c);
    cands.clear();
    for (int i = 0; i < n; ++i) {
      if (i == c) continue;
      const double d2 = squared_distance(coords.row(i), cc, coords.dim);
      if (d2 <= r2) cands.push_back({d2, i});
    }
    std::sort(cands.begin(), cands.end(),
              [&](const Candidate& a, const Candidate& b) { return candidate_less(a, b, coords); });
    out.neighbors.push_back(c);
    for (int j = 1; j < max_k; ++j) {
      out.neighbors.push_back(j - 1 < static_cast<int>(cands.size()) ? cands[j - 1].idx : c);
    }
  }
  return out;
}

std::vector<double> relative_coords(const PointArray& coords, const NeighborIndex& nbr) {
  const int dim = coords.dim;
  const int kc = nbr.centroid_count();
  std::vector<double> out(static_cast<size_t>(kc) * nbr.max_k * dim);
  size_t w = 0;
  for (int c = 0; c < kc; ++c) {
    const double* cc = coords.row(nbr.centroid_indices[c]);
    for (int j = 0; j < nbr.max_k; ++j) {
      const double* p = coords.row(nbr.neighbor(c, j));
      for (int a = 0; a < dim; ++a) out[w++] = p[a] - cc[a];
    }
  }
  return out;
}

std::vector<double> group_relative(const PointArray& coords, const std::vector<double>& feats,
                                   int feat_cols, const NeighborIndex& nbr) {
  const int dim = coords.dim;
  const int kc = nbr.centroid_count();
  const int cols = dim + feat_cols;
  std::vector<double> out(static_cast<size_t>(kc) * nbr.max_k * cols);
  size_t w = 0;
  for (int c = 0; c < kc; ++c) {
    const double* cc = coords.row(nbr.centroid_indices[c]);
    for (int j = 0; j < nbr.max_k; ++j) {
      const int idx = nbr.neighbor(c, j);
      const double* p = coords.row(idx);
      for (int a = 0; a < dim; ++a) out[w++] = p[a] - cc[a];
      for (int f = 0; f < feat_cols; ++f) {
        out[w++] = feats[static_cast<size_t>(idx) * feat_cols + f];
      }
    }
  }
  return out;
}

InterpPlan interpolation_plan(const PointArray& src_coords, const PointArray& dst_coords, int k) {
  const int ns = src_coords.size();
  if (ns < 1) throw DataError("interpolation_plan: no source points");
  const int dim = src_coords.dim;
  const int use_k = std::min(k, ns);

  InterpPlan plan;
  plan.k = use_k;
  plan.n_dst = dst_coords.size();
  plan.indices.resize(static_cast<size_t>(plan.n_dst) * use_k);
  plan.weights.resize(static_cast<size_t>(plan.n_dst) * use_k);

  std::vector<Candidate> cands(ns);
  for (int d = 0; d < plan.n_dst; ++d) {
    const double* dp = dst_coords.row(d);
    for (int i = 0; i < ns; ++i) cands[i] = {squared_distance(src_coords.row(i), dp, dim), i};
    std::partial_sort(cands.begin(), cands.begin() + use_k, cands.end(),
                      [&](const Candidate& a, const Candidate& b) {
                        return candidate_less(a, b, src_coords);
                      });
    double wsum = 0.0;
    for (int j = 0; j < use_k; ++j) {
      const double dist = std::sqrt(cands[j].d2);
      const double w = 1.0 / std::max(dist, 1e-8);
      plan.indices[static_cast<size_t>(d) * use_k + j] = cands[j].idx;
      plan.weights[static_cast<size_t>(d) * use_k + j] = w;
      wsum += w;
    }
    for (int j = 0; j < use_k; ++j) plan.weights[static_cast<size_t>(d) * use_k + j] /= wsum;
  }
  return plan;
}

std::vector<double> apply_interpolation(const InterpPlan& plan, const std::vector<double>& src_feats,
                                        int feat_cols) {
  std::vector<double> out(static_cast<size_t>(plan.n_dst) * feat_cols, 0.0);
  for (int d = 0; d < plan.n_dst; ++d) {
    for (int j = 0; j < plan.k; ++j) {
      const int idx = plan.indices[static_cast<size_t>(d) * plan.k + j];
      const double w = plan.weights[static_cast<size_t>(d) * plan.k + j];
      for (int f = 0; f < feat_cols; ++f) {
        out[static_cast<size_t>(d) * feat_cols + f] +=
            w * src_feats[static_cast<size_t>(idx) * feat_cols + f];
      }
    }
  }
  return out;
}

std::vector<double> interpolate_features(const PointArray& src_coords,
                                         const std::vector<double>& src_feats, int feat_cols,
                                         const PointArray& dst_coords) {
  return apply_interpolation(interpolation_plan(src_coords, dst_coords), src_feats, feat_cols);
}

}  // namespace branchtopo::pts
