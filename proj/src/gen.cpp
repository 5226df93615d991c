#include "branchtopo/gen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <unordered_map>
#include <unordered_set>

#include "branchtopo/rng.hpp"

namespace branchtopo::gen {
namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kDeg2Rad = kPi / 180.0;
constexpr double kSampleSpacing = 0.5;  // grid units along each spline
constexpr int kDenseSubdiv = 32;        // dense evaluations per spline segment

struct Direction {
  double theta = 0.0;  // polar, 3D only
  double phi = 0.0;    // azimuth (2D: planar angle)
};

void direction_vector(const Direction& d, int dim, double* out) {
  if (dim == 2) {
    out[0] = std::cos(d.phi);
    out[1] = std::sin(d.phi);
  } else {
    out[0] = std::sin(d.theta) * std::cos(d.phi);
    out[1] = std::sin(d.theta) * std::sin(d.phi);
    out[2] = std::cos(d.theta);
  }
}

Direction angles_from_vector(const double* v) {
  Direction d;
  d.theta = std::acos(std::clamp(v[2], -1.0, 1.0));
  d.phi = std::atan2(v[1], v[0]);
  return d;
}

// Deviate the parent end direction by `dev` radians; azimuth picks the side.
Direction deviate_direction(const Direction& parent, int dim, double dev, double azimuth,
                            double sign) {
  if (dim == 2) {
    Direction d;
    d.phi = parent.phi + sign * dev;
    return d;
  }
  double p[3];
  direction_vector(parent, 3, p);
  // Orthonormal frame around p.
  double a[3] = {1.0, 0.0, 0.0};
  if (std::abs(p[0]) > 0.9) {
    a[0] = 0.0;
    a[1] = 1.0;
  }
  double e1[3] = {a[1] * p[2] - a[2] * p[1], a[2] * p[0] - a[0] * p[2],
                  a[0] * p[1] - a[1] * p[0]};
  const double n1 = std::sqrt(e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]);
  for (double& x : e1) x /= n1;
  const double e2[3] = {p[1] * e1[2] - p[2] * e1[1], p[2] * e1[0] - p[0] * e1[2],
                        p[0] * e1[1] - p[1] * e1[0]};
  const double cd = std::cos(dev), sd = std::sin(dev);
  const double ca = std::cos(azimuth), sa = std::sin(azimuth);
  double v[3];
  for (int k = 0; k < 3; ++k) v[k] = cd * p[k] + sd * (ca * e1[k] + sa * e2[k]);
  return angles_from_vector(v);
}

struct GrowTask {
  int parent_id;   // -1 for root
  int level;
  int child_rank;  // position among siblings
  Direction parent_dir;
  std::vector<double> start;
};

// Clamped cubic spline through (t_i, y_i) with end slopes s0/s1; returns the
// second derivatives M_i (Thomas algorithm).
std::vector<double> clamped_spline_m(const std::vector<double>& t, const std::vector<double>& y,
                                     double s0, double s1) {
  const size_t n = t.size();
  std::vector<double> a(n, 0.0), b(n, 0.0), c(n, 0.0), r(n, 0.0);
  const double h0 = t[1] - t[0];
  const double hn = t[n - 1] - t[n - 2];
  b[0] = 2.0 * h0;
  c[0] = h0;
  r[0] = 6.0 * ((y[1] - y[0]) / h0 - s0);
  for (size_t i = 1; i + 1 < n; ++i) {
    const double hl = t[i] - t[i - 1];
    const double hr = t[i + 1] - t[i];
    a[i] = hl;
    b[i] = 2.0 * (hl + hr);
    c[i] = hr;
    r[i] = 6.0 * ((y[i + 1] - y[i]) / hr - (y[i] - y[i - 1]) / hl);
  }
  a[n - 1] = hn;
  b[n - 1] = 2.0 * hn;
  r[n - 1] = 6.0 * (s1 - (y[n - 1] - y[n - 2]) / hn);

  for (size_t i = 1; i < n; ++i) {
    const double w = a[i] / b[i - 1];
    b[i] -= w * c[i - 1];
    r[i] -= w * r[i - 1];
  }
  std::vector<double> m(n);
  m[n - 1] = r[n - 1] / b[n - 1];
  for (size_t i = n - 1; i-- > 0;) m[i] = (r[i] - c[i] * m[i + 1]) / b[i];
  return m;
}

double spline_eval(const std::vector<double>& t, const std::vector<double>& y,
                   const std::vector<double>& m, size_t seg, double x) {
  const double h = t[seg + 1] - t[seg];
  const double dl = t[seg + 1] - x;
  const double dr = x - t[seg];
  return m[seg] * dl * dl * dl / (6.0 * h) + m[seg + 1] * dr * dr * dr / (6.0 * h) +
         (y[seg] / h - m[seg] * h / 6.0) * dl + (y[seg + 1] / h - m[seg + 1] * h / 6.0) * dr;
}

// Densely sampled spline through the branch control points, clamped to the
// first/last chord directions.
PointArray dense_branch_curve(const Branch& br, int dim) {
  // Collapse consecutive duplicates so knot spacing stays positive.
  PointArray ctrl(dim);
  for (int i = 0; i < br.polyline.size(); ++i) {
    if (ctrl.size() == 0 ||
        squared_distance(ctrl.row(ctrl.size() - 1), br.polyline.row(i), dim) > 1e-24) {
      ctrl.push_row(br.polyline.row(i));
    }
  }
  const int n = ctrl.size();
  PointArray dense(dim);
  if (n == 1) {
    dense.push_row(ctrl.row(0));
    return dense;
  }
  std::vector<double> t(n, 0.0);
  for (int i = 1; i < n; ++i) {
    t[i] = t[i - 1] + std::sqrt(squared_distance(ctrl.row(i), ctrl.row(i - 1), dim));
  }
  std::vector<std::vector<double>> y(dim, std::vector<double>(n));
  for (int a = 0; a < dim; ++a)
    for (int i = 0; i < n; ++i) y[a][i] = ctrl.at(i, a);

  std::vector<std::vector<double>> m(dim);
  for (int a = 0; a < dim; ++a) {
    const double s0 = (y[a][1] - y[a][0]) / (t[1] - t[0]);
    const double s1 = (y[a][n - 1] - y[a][n - 2]) / (t[n - 1] - t[n - 2]);
    m[a] = clamped_spline_m(t, y[a], s0, s1);
  }

  dense.push_row(ctrl.row(0));
  std::vector<double> p(dim);
  for (int seg = 0; seg + 1 < n; ++seg) {
    for (int j = 1; j <= kDenseSubdiv; ++j) {
      const double x = t[seg] + (t[seg + 1] - t[seg]) * j / kDenseSubdiv;
      for (int a = 0; a < dim; ++a) p[a] = spline_eval(t, y[a], m[a], seg, x);
      dense.push_row(p.data());
    }
  }
  return dense;
}

// Row-major dim x dim rotation matrix, uniform over SO(dim).
std::vector<double> random_rotation(int dim, Rng& rng) {
  if (dim == 2) {
    const double a = rng.uniform(0.0, 2.0 * kPi);
    return {std::cos(a), -std::sin(a), std::sin(a), std::cos(a)};
  }
  // Shoemake's uniform quaternion.
  const double u1 = rng.uniform01(), u2 = rng.uniform01(), u3 = rng.uniform01();
  const double qx = std::sqrt(1.0 - u1) * std::sin(2.0 * kPi * u2);
  const double qy = std::sqrt(1.0 - u1) * std::cos(2.0 * kPi * u2);
  const double qz = std::sqrt(u1) * std::sin(2.0 * kPi * u3);
  const double qw = std::sqrt(u1) * std::cos(2.0 * kPi * u3);
  return {1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw),
          2 * (qx * qy + qz * qw),     1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw),
          2 * (qx * qz - qy * qw),     2 * (qy * qz + qx * qw),     1 - 2 * (qx * qx + qy * qy)};
}

void apply_rotation(const std::vector<double>& rot, int dim, const double* in, double* out) {
  for (int i = 0; i < dim; ++i) {
    double s = 0.0;
    for (int j = 0; j < dim; ++j) s += rot[static_cast<size_t>(i) * dim + j] * in[j];
    out[i] = s;
  }
}

int64_t pack_cell(const int64_t* c, int dim) {
  // Grid coordinates fit in 21 bits each (grid_size well below 2^21).
  int64_t key = 0;
  for (int a = 0; a < dim; ++a) key |= (c[a] & 0x1fffff) << (21 * a);
  return key;
}

}  // namespace

void GenConfig::validate() const {
  if (dim != 2 && dim != 3) throw DataError("GenConfig: dim must be 2 or 3");
  if (p_trifurcation < 0.0 || p_trifurcation > 1.0)
    throw DataError("GenConfig: p_trifurcation must be in [0,1]");
  if (grid_size < 8) throw DataError("GenConfig: grid_size must be >= 8");
  if (steps_mean <= 0.0) throw DataError("GenConfig: steps_mean must be > 0");
  if (max_levels < 1) throw DataError("GenConfig: max_levels must be >= 1");
  if (step_len_max <= 0.0) throw DataError("GenConfig: step_len_max must be > 0");
  if (endpoint_radius <= 0.0) throw DataError("GenConfig: endpoint_radius must be > 0");
  if (fixed_levels < 0) throw DataError("GenConfig: fixed_levels must be >= 0");
}

void AugConfig::validate() const {
  if (dropout_p < 0.0 || dropout_p > 1.0) throw DataError("AugConfig: dropout_p must be in [0,1]");
  if (n_points < 1) throw DataError("AugConfig: n_points must be >= 1");
  if (jitter_sd < 0.0) throw DataError("AugConfig: jitter_sd must be >= 0");
}

TreeStructure grow_tree(const GenConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);

  const int levels = cfg.fixed_levels > 0
                         ? cfg.fixed_levels
                         : static_cast<int>(rng.uniform_int(1, cfg.max_levels));

  TreeStructure tree;
  tree.dim = cfg.dim;

  std::vector<GrowTask> queue;
  queue.push_back({-1, 0, 0, Direction{}, std::vector<double>(cfg.dim, 0.0)});
  std::vector<int> child_count;  // per branch id

  for (size_t head = 0; head < queue.size(); ++head) {
    const GrowTask task = queue[head];
    Branch br;
    br.id = static_cast<int>(tree.branches.size());
    br.parent_id = task.parent_id;
    br.level = task.level;
    br.polyline = PointArray(cfg.dim);
    br.polyline.push_row(task.start.data());

    Direction dir = task.parent_dir;  // root grows along the seed direction
    if (task.parent_id >= 0) {
      const double dev =
          rng.uniform(cfg.start_angle_min_deg, cfg.start_angle_max_deg) * kDeg2Rad;
      double sign = 1.0;
      double azimuth = 0.0;
      if (cfg.dim == 2) {
        // First two children fan to opposite sides; a third picks at random.
        sign = task.child_rank == 0 ? 1.0 : (task.child_rank == 1 ? -1.0 : (rng.bernoulli(0.5) ? 1.0 : -1.0));
      } else {
        azimuth = rng.uniform(0.0, 2.0 * kPi);
      }
      dir = deviate_direction(task.parent_dir, cfg.dim, dev, azimuth, sign);
    }

    const double walk_sd =
        rng.uniform(cfg.step_angle_sd_min_deg, cfg.step_angle_sd_max_deg) * kDeg2Rad;
    int n_steps;
    if (cfg.fixed_length) {
      n_steps = std::max(2, static_cast<int>(std::llround(cfg.steps_mean)));
    } else {
      n_steps = std::max(2, static_cast<int>(std::llround(rng.normal(cfg.steps_mean, cfg.steps_sd))));
    }

    std::vector<double> pos = task.start;
    std::vector<double> v(cfg.dim);
    for (int s = 0; s < n_steps; ++s) {
      dir.phi = rng.normal(dir.phi, walk_sd);
      if (cfg.dim == 3) dir.theta = rng.normal(dir.theta, walk_sd);
      const double len = cfg.fixed_length ? 0.5 * cfg.step_len_max
                                          : cfg.step_len_max * rng.uniform_open0_closed1();
      direction_vector(dir, cfg.dim, v.data());
      for (int a = 0; a < cfg.dim; ++a) pos[a] += len * v[a];
      br.polyline.push_row(pos.data());
    }

    int n_children = 0;
    if (task.level < levels) {
      n_children = rng.bernoulli(cfg.p_trifurcation) ? 3 : 2;
      for (int c = 0; c < n_children; ++c) {
        queue.push_back({br.id, task.level + 1, c, dir, pos});
      }
    }
    child_count.push_back(n_children);
    tree.branches.push_back(std::move(br));
  }

  tree.junctions = PointArray(cfg.dim);
  tree.terminals = PointArray(cfg.dim);
  tree.terminals.push_row(tree.branches[0].polyline.row(0));  // seed point is a tip
  for (const Branch& br : tree.branches) {
    const double* end = br.polyline.row(br.polyline.size() - 1);
    if (child_count[br.id] > 0) {
      tree.junctions.push_row(end);
    } else {
      tree.terminals.push_row(end);
    }
  }
  return tree;
}

RasterResult rasterize_detailed(const TreeStructure& tree, const GenConfig& cfg, uint64_t seed) {
  cfg.validate();
  const int dim = tree.dim;
  if (tree.branches.empty()) throw DataError("degenerate structure");
  for (const Branch& br : tree.branches) {
    if (br.polyline.size() < 2) throw DataError("degenerate structure");
  }

  Rng rng(seed);
  const std::vector<double> rot = random_rotation(dim, rng);

  // Dense curves, rotated.
  std::vector<PointArray> dense(tree.branches.size());
  std::vector<double> lo(dim, std::numeric_limits<double>::infinity());
  std::vector<double> hi(dim, -std::numeric_limits<double>::infinity());
  std::vector<double> q(dim);
  for (size_t b = 0; b < tree.branches.size(); ++b) {
    PointArray curve = dense_branch_curve(tree.branches[b], dim);
    PointArray rotated(dim, curve.size());
    for (int i = 0; i < curve.size(); ++i) {
      apply_rotation(rot, dim, curve.row(i), rotated.row(i));
      for (int a = 0; a < dim; ++a) {
        lo[a] = std::min(lo[a], rotated.at(i, a));
        hi[a] = std::max(hi[a], rotated.at(i, a));
      }
    }
    dense[b] = std::move(rotated);
  }

  double max_extent = 0.0;
  for (int a = 0; a < dim; ++a) max_extent = std::max(max_extent, hi[a] - lo[a]);
  if (max_extent < 1e-9) throw DataError("degenerate structure");
  const double scale = (cfg.grid_size - 1) / max_extent;

  auto to_grid = [&](const double* in, double* out) {
    for (int a = 0; a < dim; ++a) out[a] = (in[a] - lo[a]) * scale;
  };

  RasterResult res;
  res.cloud.coords = PointArray(dim);
  res.junctions = PointArray(dim);
  res.terminals = PointArray(dim);
  for (int i = 0; i < tree.junctions.size(); ++i) {
    apply_rotation(rot, dim, tree.junctions.row(i), q.data());
    double g[3];
    to_grid(q.data(), g);
    res.junctions.push_row(g);
  }
  for (int i = 0; i < tree.terminals.size(); ++i) {
    apply_rotation(rot, dim, tree.terminals.row(i), q.data());
    double g[3];
    to_grid(q.data(), g);
    res.terminals.push_row(g);
  }

  // Resample every branch at equal arc-length intervals <= kSampleSpacing,
  // round to grid cells, drop duplicate cells (first occurrence wins).
  std::unordered_set<int64_t> seen;
  std::vector<double> gp(dim);
  for (size_t b = 0; b < tree.branches.size(); ++b) {
    const PointArray& curve = dense[b];
    const int nd = curve.size();
    std::vector<double> clen(nd, 0.0);
    for (int i = 1; i < nd; ++i) {
      clen[i] = clen[i - 1] + scale * std::sqrt(squared_distance(curve.row(i), curve.row(i - 1), dim));
    }
    const double total = clen[nd - 1];
    const int m = total < 1e-12 ? 0 : static_cast<int>(std::ceil(total / kSampleSpacing));
    int cursor = 0;
    for (int j = 0; j <= m; ++j) {
      const double target = m == 0 ? 0.0 : total * j / m;
      while (cursor + 1 < nd - 1 && clen[cursor + 1] < target) ++cursor;
      double px[3];
      if (nd == 1) {
        to_grid(curve.row(0), px);
      } else {
        const double span = clen[cursor + 1] - clen[cursor];
        const double w = span > 0.0 ? (target - clen[cursor]) / span : 0.0;
        for (int a = 0; a < dim; ++a) {
          gp[a] = curve.at(cursor, a) + w * (curve.at(cursor + 1, a) - curve.at(cursor, a));
        }
        to_grid(gp.data(), px);
      }
      int64_t cell[3];
      for (int a = 0; a < dim; ++a) {
        cell[a] = std::clamp<int64_t>(std::llround(px[a]), 0, cfg.grid_size - 1);
      }
      if (!seen.insert(pack_cell(cell, dim)).second) continue;
      double rounded[3];
      for (int a = 0; a < dim; ++a) rounded[a] = static_cast<double>(cell[a]);
      res.cloud.coords.push_row(rounded);
      res.cloud.instance.push_back(static_cast<int>(b));
      res.cloud.cls.push_back(PointClass::kBranch);
    }
  }

  // End-point class: within endpoint_radius of any junction or terminal.
  const double r2 = cfg.endpoint_radius * cfg.endpoint_radius;
  for (int i = 0; i < res.cloud.size(); ++i) {
    const double* p = res.cloud.coords.row(i);
    bool close = false;
    for (int j = 0; j < res.junctions.size() && !close; ++j) {
      close = squared_distance(p, res.junctions.row(j), dim) <= r2;
    }
    for (int j = 0; j < res.terminals.size() && !close; ++j) {
      close = squared_distance(p, res.terminals.row(j), dim) <= r2;
    }
    if (close) res.cloud.cls[i] = PointClass::kEndPoint;
  }
  return res;
}

LabeledPointCloud rasterize(const TreeStructure& tree, const GenConfig& cfg, uint64_t seed) {
  return rasterize_detailed(tree, cfg, seed).cloud;
}

LabeledPointCloud augment(const LabeledPointCloud& cloud, const AugConfig& aug) {
  aug.validate();
  const int dim = cloud.dim();
  LabeledPointCloud out;
  out.coords = cloud.coords;
  out.instance = cloud.instance;
  out.cls = cloud.cls;

  // Independent streams so zeroing one augmentation leaves the other's draws
  // untouched (ablation switches).
  if (aug.jitter_sd > 0.0) {
    Rng jit(mix_seed(aug.rng_seed, 0xA11));
    for (int i = 0; i < out.size(); ++i) {
      for (int a = 0; a < dim; ++a) out.coords.at(i, a) += jit.normal(0.0, aug.jitter_sd);
    }
  }
  if (aug.dropout_p > 0.0) {
    Rng drop(mix_seed(aug.rng_seed, 0xD07));
    LabeledPointCloud kept;
    kept.coords = PointArray(dim);
    for (int i = 0; i < out.size(); ++i) {
      if (drop.uniform01() < aug.dropout_p) continue;
      kept.coords.push_row(out.coords.row(i));
      kept.instance.push_back(out.instance[i]);
      kept.cls.push_back(out.cls[i]);
    }
    if (kept.size() == 0) throw DataError("empty cloud after dropout");
    out = std::move(kept);
  }
  return out;
}

void FinalizeTransform::apply(PointArray& pts) const {
  for (int i = 0; i < pts.size(); ++i) {
    for (int a = 0; a < pts.dim; ++a) pts.at(i, a) = (pts.at(i, a) - offset[a]) * scale;
  }
}

FinalizeResult finalize_detailed(const LabeledPointCloud& cloud, int n_points, uint64_t seed) {
  const int n = cloud.size();
  const int dim = cloud.dim();
  if (n < 1) throw DataError("finalize: empty cloud");
  if (n > n_points) throw DataError("cloud exceeds capacity");

  FinalizeResult res;
  res.transform.offset.assign(dim, std::numeric_limits<double>::infinity());
  double max_extent = 0.0;
  for (int a = 0; a < dim; ++a) {
    double mn = std::numeric_limits<double>::infinity();
    double mx = -mn;
    for (int i = 0; i < n; ++i) {
      mn = std::min(mn, cloud.coords.at(i, a));
      mx = std::max(mx, cloud.coords.at(i, a));
    }
    res.transform.offset[a] = mn;
    max_extent = std::max(max_extent, mx - mn);
  }
  res.transform.scale = max_extent > 0.0 ? 1.0 / max_extent : 1.0;

  LabeledPointCloud scaled;
  scaled.coords = cloud.coords;
  scaled.instance = cloud.instance;
  scaled.cls = cloud.cls;
  res.transform.apply(scaled.coords);

  for (int i = n; i < n_points; ++i) {
    std::vector<double> pad(dim, -1.0);
    scaled.coords.push_row(pad.data());
    scaled.instance.push_back(kPaddingInstance);
    scaled.cls.push_back(PointClass::kPadding);
  }

  std::vector<int> order(n_points);
  for (int i = 0; i < n_points; ++i) order[i] = i;
  Rng perm(mix_seed(seed, 0x5EED));
  perm.shuffle(order);

  res.cloud.coords = PointArray(dim);
  for (int i = 0; i < n_points; ++i) {
    res.cloud.coords.push_row(scaled.coords.row(order[i]));
    res.cloud.instance.push_back(scaled.instance[order[i]]);
    res.cloud.cls.push_back(scaled.cls[order[i]]);
  }
  return res;
}

LabeledPointCloud finalize(const LabeledPointCloud& cloud, int n_points, uint64_t seed) {
  return finalize_detailed(cloud, n_points, seed).cloud;
}

int count_instances(const LabeledPointCloud& cloud) {
  std::unordered_set<int> ids;
  for (int id : cloud.instance) {
    if (id != kPaddingInstance) ids.insert(id);
  }
  return static_cast<int>(ids.size());
}

StructureSample make_structure(const GenConfig& cfg, const AugConfig& aug, uint64_t seed) {
  const TreeStructure tree = grow_tree(cfg, mix_seed(seed, 1));
  const RasterResult raster = rasterize_detailed(tree, cfg, mix_seed(seed, 2));
  AugConfig staged = aug;
  staged.rng_seed = mix_seed(seed, 3);
  const LabeledPointCloud augmented = augment(raster.cloud, staged);
  FinalizeResult fin = finalize_detailed(augmented, aug.n_points, mix_seed(seed, 4));

  StructureSample sample;
  sample.cloud = std::move(fin.cloud);
  sample.junctions = raster.junctions;
  sample.terminals = raster.terminals;
  fin.transform.apply(sample.junctions);
  fin.transform.apply(sample.terminals);
  sample.n_instances = count_instances(sample.cloud);
  return sample;
}

}  // namespace branchtopo::gen
