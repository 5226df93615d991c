#include "branchtopo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

namespace branchtopo::metrics {
namespace {

// Mean over labels of A of the best Dice overlap with any label of B.
double best_dice(const std::map<int, std::vector<int>>& a, const std::map<int, std::vector<int>>& b) {
  double total = 0.0;
  for (const auto& [la, rows_a] : a) {
    double best = 0.0;
    for (const auto& [lb, rows_b] : b) {
      // Membership lists are sorted by construction.
      size_t i = 0, j = 0, inter = 0;
      while (i < rows_a.size() && j < rows_b.size()) {
        if (rows_a[i] < rows_b[j]) {
          ++i;
        } else if (rows_b[j] < rows_a[i]) {
          ++j;
        } else {
          ++inter;
          ++i;
          ++j;
        }
      }
      best = std::max(best, 2.0 * inter / (rows_a.size() + rows_b.size()));
    }
    total += best;
  }
  return total / a.size();
}

}  // namespace

double sbd(const std::vector<int>& pred_labels, const std::vector<int>& gt_labels) {
  if (pred_labels.size() != gt_labels.size()) throw DataError("sbd: label length mismatch");
  std::map<int, std::vector<int>> pred, gt;
  for (size_t i = 0; i < gt_labels.size(); ++i) {
    if (gt_labels[i] < 0) continue;  // padding rows carry no instance
    gt[gt_labels[i]].push_back(static_cast<int>(i));
    if (pred_labels[i] >= 0) pred[pred_labels[i]].push_back(static_cast<int>(i));
  }
  if (pred.empty() || gt.empty()) return 0.0;
  return 100.0 * std::min(best_dice(pred, gt), best_dice(gt, pred));
}

double dic(const std::vector<int>& pred_counts, const std::vector<int>& gt_counts) {
  if (pred_counts.empty() || pred_counts.size() != gt_counts.size()) {
    throw DataError("dic: count lists empty or mismatched");
  }
  double total = 0.0;
  for (size_t i = 0; i < pred_counts.size(); ++i) {
    total += std::abs(pred_counts[i] - gt_counts[i]);
  }
  return total / pred_counts.size();
}

DscResult ds_c(const PointArray& pred_centers, const PointArray& gt_centers, double match_radius) {
  if (match_radius <= 0.0) throw DataError("ds_c: match_radius must be > 0");
  const int np = pred_centers.size();
  const int ng = gt_centers.size();

  DscResult res;
  if (np == 0 && ng == 0) {
    res.score = 100.0;
    res.vacuous = true;
    return res;
  }

  struct Pair {
    double d2;
    int p;
    int g;
  };
  std::vector<Pair> pairs;
  const double r2 = match_radius * match_radius;
  for (int p = 0; p < np; ++p) {
    for (int g = 0; g < ng; ++g) {
      const double d2 = squared_distance(pred_centers.row(p), gt_centers.row(g),
                                         pred_centers.dim);
      if (d2 <= r2) pairs.push_back({d2, p, g});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    return std::tie(a.d2, a.p, a.g) < std::tie(b.d2, b.p, b.g);
  });

  std::vector<char> p_used(np, 0), g_used(ng, 0);
  for (const Pair& pr : pairs) {
    if (p_used[pr.p] || g_used[pr.g]) continue;
    p_used[pr.p] = 1;
    g_used[pr.g] = 1;
    ++res.tp;
  }
  res.fp = np - res.tp;
  res.fn = ng - res.tp;
  res.score = 100.0 * 2.0 * res.tp / (2.0 * res.tp + res.fp + res.fn);
  return res;
}

}  // namespace branchtopo::metrics
