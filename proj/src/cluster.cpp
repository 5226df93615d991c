#include "branchtopo/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <unordered_map>

namespace branchtopo::cluster {
namespace {

// Hash key for a grid cell in arbitrary dimension.
struct CellKey {
  std::vector<int64_t> cell;
  bool operator==(const CellKey& other) const { return cell == other.cell; }
};

struct CellKeyHash {
  size_t operator()(const CellKey& k) const {
    uint64_t h = 0x9e3779b97f4a7c15ULL;
    for (const int64_t v : k.cell) {
      h ^= static_cast<uint64_t>(v) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    }
    return static_cast<size_t>(h);
  }
};

struct Mode {
  std::vector<double> pos;
  int support = 0;
};

bool mode_order(const Mode& a, const Mode& b) {
  if (a.support != b.support) return a.support > b.support;
  return compare_rows(a.pos.data(), b.pos.data(), static_cast<int>(a.pos.size())) < 0;
}

}  // namespace

ClusterResult mean_shift(const PointArray& points, double bandwidth, double tol, int max_iter) {
  if (points.size() < 1) throw DataError("mean_shift: no points");
  if (bandwidth <= 0.0) throw DataError("mean_shift: bandwidth must be > 0");
  const int n = points.size();
  const int dim = points.dim;
  const double bw2 = bandwidth * bandwidth;

  // One seed per bandwidth/2 grid cell: the lexicographically smallest member.
  const double cell_size = bandwidth / 2.0;
  std::unordered_map<CellKey, int, CellKeyHash> bins;
  for (int i = 0; i < n; ++i) {
    CellKey key;
    key.cell.resize(dim);
    for (int a = 0; a < dim; ++a) {
      key.cell[a] = static_cast<int64_t>(std::floor(points.at(i, a) / cell_size));
    }
    auto [it, inserted] = bins.emplace(std::move(key), i);
    if (!inserted && compare_rows(points.row(i), points.row(it->second), dim) < 0) {
      it->second = i;
    }
  }
  std::vector<int> seeds;
  seeds.reserve(bins.size());
  for (const auto& [key, idx] : bins) seeds.push_back(idx);
  std::sort(seeds.begin(), seeds.end());

  std::vector<Mode> modes;
  modes.reserve(seeds.size());
  std::vector<double> pos(dim), next(dim);
  for (const int seed : seeds) {
    std::copy_n(points.row(seed), dim, pos.data());
    int inside = 0;
    for (int iter = 0; iter < max_iter; ++iter) {
      std::fill(next.begin(), next.end(), 0.0);
      inside = 0;
      for (int i = 0; i < n; ++i) {
        if (squared_distance(points.row(i), pos.data(), dim) <= bw2) {
          for (int a = 0; a < dim; ++a) next[a] += points.at(i, a);
          ++inside;
        }
      }
      for (int a = 0; a < dim; ++a) next[a] /= inside;  // seed itself is always inside
      const double shift2 = squared_distance(next.data(), pos.data(), dim);
      pos.swap(next);
      if (shift2 < tol * tol) break;
    }
    modes.push_back({pos, inside});
  }

  // Merge converged modes closer than bandwidth/2; stronger support first.
  std::sort(modes.begin(), modes.end(), mode_order);
  const double merge2 = (bandwidth / 2.0) * (bandwidth / 2.0);
  ClusterResult result;
  result.centers = PointArray(dim);
  for (const Mode& m : modes) {
    bool taken = false;
    for (int j = 0; j < result.centers.size() && !taken; ++j) {
      taken = squared_distance(m.pos.data(), result.centers.row(j), dim) < merge2;
    }
    if (!taken) result.centers.push_row(m.pos.data());
  }

  result.assignment.resize(n);
  for (int i = 0; i < n; ++i) {
    int best = 0;
    double best_d2 = squared_distance(points.row(i), result.centers.row(0), dim);
    for (int j = 1; j < result.centers.size(); ++j) {
      const double d2 = squared_distance(points.row(i), result.centers.row(j), dim);
      if (d2 < best_d2) {
        best_d2 = d2;
        best = j;
      }
    }
    result.assignment[i] = best;
  }
  return result;
}

std::vector<int> extract_instances(const PointArray& embeddings,
                                   const std::vector<int>& predicted_class, double delta_v) {
  const int n = embeddings.size();
  if (static_cast<int>(predicted_class.size()) != n) {
    throw DataError("extract_instances: class count mismatch");
  }
  std::vector<int> keep;
  for (int i = 0; i < n; ++i) {
    if (predicted_class[i] != static_cast<int>(PointClass::kPadding)) keep.push_back(i);
  }
  std::vector<int> labels(n, kPaddingInstance);
  if (keep.empty()) return labels;

  PointArray subset(embeddings.dim);
  for (const int i : keep) subset.push_row(embeddings.row(i));
  const ClusterResult clusters = mean_shift(subset, delta_v);
  for (size_t j = 0; j < keep.size(); ++j) labels[keep[j]] = clusters.assignment[j];
  return labels;
}

PointArray localize_junctions(const PointArray& coords, const std::vector<int>& predicted_class,
                              double bandwidth_xy) {
  const int n = coords.size();
  if (static_cast<int>(predicted_class.size()) != n) {
    throw DataError("localize_junctions: class count mismatch");
  }
  PointArray subset(coords.dim);
  for (int i = 0; i < n; ++i) {
    if (predicted_class[i] == static_cast<int>(PointClass::kEndPoint)) {
      subset.push_row(coords.row(i));
    }
  }
  if (subset.size() == 0) return PointArray(coords.dim);
  return mean_shift(subset, bandwidth_xy).centers;
}

}  // namespace branchtopo::cluster
