#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "branchtopo/adam.hpp"
#include "branchtopo/pointops.hpp"
#include "branchtopo/rng.hpp"
#include "branchtopo/tensor.hpp"
#include "branchtopo/weights.hpp"

namespace branchtopo::net {

// One grouping scale inside a PFE level: ball radius (as a multiple of the
// base radius) and the shared-FC widths applied to the grouped frame.
struct ScaleConfig {
  double radius_mult = 1.0;
  std::vector<int> widths;
};

struct PfeLevelConfig {
  int k = 1;               // centroids sampled at this level
  bool group_all = false;  // single group containing every point
  int max_k = 32;          // neighbor cap per ball (ignored for group_all)
  std::vector<ScaleConfig> scales;
  int g_width = 0;  // FC width after the coordinate concat; 0 = no such layer
};

struct NetworkConfig {
  int dim = 3;
  int n_points = 10000;
  double base_radius = 4e-3;
  // When false the centroid-coordinate concat and the g layers are skipped,
  // which reduces the encoder to plain multi-scale grouping (the comparison
  // baseline).
  bool use_global_coords = true;
  std::vector<PfeLevelConfig> pfe;
  std::vector<std::vector<int>> pfp;
  std::vector<int> head_embed{128, 15};
  std::vector<int> head_semantic{128, 3};

  static NetworkConfig paper(int dim);
  static NetworkConfig desk(int dim);
  static NetworkConfig tiny(int dim);

  void validate() const;
  nlohmann::json to_json() const;
  static NetworkConfig from_json(const nlohmann::json& j);
};

inline NetworkConfig NetworkConfig::paper(int dim) {
  NetworkConfig cfg;
  cfg.dim = dim;
  cfg.n_points = 10000;
  cfg.base_radius = 4e-3;
  cfg.pfe = {
      {512, false, 32, {{1, {32, 32, 64}}, {4, {64, 64, 128}}, {16, {64, 96, 128}}}, 128},
      {128, false, 32, {{4, {64, 64, 128}}, {16, {128, 128, 256}}, {64, {128, 128, 256}}}, 256},
      {1, true, 32, {{0, {256, 512, 1024}}}, 0},
  };
  cfg.pfp = {{256, 128}, {256, 128}, {128, 128, 128}};
  cfg.head_embed = {128, 15};
  cfg.head_semantic = {128, 3};
  return cfg;
}

// Same shape halved: trains in minutes on one CPU core. The base radius grows
// with the coarser sampling so ball occupancy stays comparable.
inline NetworkConfig NetworkConfig::desk(int dim) {
  NetworkConfig cfg;
  cfg.dim = dim;
  cfg.n_points = 1024;
  cfg.base_radius = 1.6e-2;
  cfg.pfe = {
      {128, false, 16, {{1, {16, 16, 32}}, {4, {32, 32, 64}}, {16, {32, 48, 64}}}, 64},
      {32, false, 16, {{4, {32, 32, 64}}, {16, {64, 64, 128}}, {64, {64, 64, 128}}}, 128},
      {1, true, 16, {{0, {128, 256, 512}}}, 0},
  };
  cfg.pfp = {{128, 64}, {128, 64}, {64, 64, 64}};
  cfg.head_embed = {64, 15};
  cfg.head_semantic = {64, 3};
  return cfg;
}

// Gradient-check scale: 64 points, widths divided by 8.
inline NetworkConfig NetworkConfig::tiny(int dim) {
  NetworkConfig cfg;
  cfg.dim = dim;
  cfg.n_points = 64;
  cfg.base_radius = 0.08;
  cfg.pfe = {
      {16, false, 8, {{1, {4, 4, 8}}, {4, {8, 8, 16}}, {16, {8, 12, 16}}}, 16},
      {4, false, 8, {{4, {8, 8, 16}}, {16, {16, 16, 32}}, {64, {16, 16, 32}}}, 32},
      {1, true, 8, {{0, {32, 64, 128}}}, 0},
  };
  cfg.pfp = {{32, 16}, {32, 16}, {16, 16, 16}};
  cfg.head_embed = {16, 15};
  cfg.head_semantic = {16, 3};
  return cfg;
}

inline void NetworkConfig::validate() const {
  if (dim != 2 && dim != 3) throw DataError("NetworkConfig: dim must be 2 or 3");
  if (n_points < 1) throw DataError("NetworkConfig: n_points must be >= 1");
  if (base_radius <= 0) throw DataError("NetworkConfig: base_radius must be > 0");
  if (pfe.empty()) throw DataError("NetworkConfig: no PFE levels");
  if (pfp.size() != pfe.size()) {
    throw DataError("NetworkConfig: PFP stage count must equal PFE level count");
  }
  int prev = n_points;
  for (const auto& lvl : pfe) {
    if (lvl.k < 1 || lvl.k > prev) throw DataError("NetworkConfig: centroid count out of range");
    if (lvl.scales.empty()) throw DataError("NetworkConfig: PFE level has no scales");
    for (const auto& s : lvl.scales) {
      if (s.widths.empty()) throw DataError("NetworkConfig: scale has no FC widths");
    }
    if (!lvl.group_all && lvl.max_k < 1) throw DataError("NetworkConfig: max_k must be >= 1");
    prev = lvl.k;
  }
  for (const auto& st : pfp) {
    if (st.empty()) throw DataError("NetworkConfig: empty PFP stage");
  }
  if (head_embed.empty() || head_semantic.empty()) throw DataError("NetworkConfig: empty head");
  if (head_semantic.back() != 3) throw DataError("NetworkConfig: semantic head must end at 3 classes");
}

inline nlohmann::json NetworkConfig::to_json() const {
  nlohmann::json j;
  j["dim"] = dim;
  j["n_points"] = n_points;
  j["base_radius"] = base_radius;
  j["use_global_coords"] = use_global_coords;
  j["pfe"] = nlohmann::json::array();
  for (const auto& lvl : pfe) {
    nlohmann::json jl;
    jl["k"] = lvl.k;
    jl["group_all"] = lvl.group_all;
    jl["max_k"] = lvl.max_k;
    jl["g_width"] = lvl.g_width;
    jl["scales"] = nlohmann::json::array();
    for (const auto& s : lvl.scales) {
      jl["scales"].push_back({{"radius_mult", s.radius_mult}, {"widths", s.widths}});
    }
    j["pfe"].push_back(std::move(jl));
  }
  j["pfp"] = pfp;
  j["head_embed"] = head_embed;
  j["head_semantic"] = head_semantic;
  return j;
}

inline NetworkConfig NetworkConfig::from_json(const nlohmann::json& j) {
  NetworkConfig cfg;
  cfg.dim = j.at("dim");
  cfg.n_points = j.at("n_points");
  cfg.base_radius = j.at("base_radius");
  cfg.use_global_coords = j.at("use_global_coords");
  cfg.pfe.clear();
  for (const auto& jl : j.at("pfe")) {
    PfeLevelConfig lvl;
    lvl.k = jl.at("k");
    lvl.group_all = jl.at("group_all");
    lvl.max_k = jl.at("max_k");
    lvl.g_width = jl.at("g_width");
    for (const auto& js : jl.at("scales")) {
      lvl.scales.push_back({js.at("radius_mult"), js.at("widths").get<std::vector<int>>()});
    }
    cfg.pfe.push_back(std::move(lvl));
  }
  cfg.pfp = j.at("pfp").get<std::vector<std::vector<int>>>();
  cfg.head_embed = j.at("head_embed").get<std::vector<int>>();
  cfg.head_semantic = j.at("head_semantic").get<std::vector<int>>();
  cfg.validate();
  return cfg;
}

// Feature width present at each resolution level, index 0..L. Level 0 carries
// no features (points enter as bare coordinates; local frames are relative).
inline std::vector<int> level_feature_widths(const NetworkConfig& cfg) {
  std::vector<int> w{0};
  for (const auto& lvl : cfg.pfe) {
    int concat = 0;
    for (const auto& s : lvl.scales) concat += s.widths.back();
    w.push_back(cfg.use_global_coords && lvl.g_width > 0 ? lvl.g_width : concat);
  }
  return w;
}

struct FcSpec {
  std::string name;
  int in = 0;
  int out = 0;
  bool bn = true;  // batchnorm + relu follow; last head layers carry neither
};

// The full ordered layer table; initialization, the forward pass, and
// checkpoint validation all derive from it.
inline std::vector<FcSpec> fc_table(const NetworkConfig& cfg) {
  cfg.validate();
  std::vector<FcSpec> table;
  const std::vector<int> level_w = level_feature_widths(cfg);
  const int levels = static_cast<int>(cfg.pfe.size());

  for (int i = 0; i < levels; ++i) {
    const auto& lvl = cfg.pfe[i];
    int concat = 0;
    for (size_t s = 0; s < lvl.scales.size(); ++s) {
      int in = cfg.dim + level_w[i];
      for (size_t l = 0; l < lvl.scales[s].widths.size(); ++l) {
        const int out = lvl.scales[s].widths[l];
        table.push_back({"pfe" + std::to_string(i) + ".s" + std::to_string(s) + ".fc" +
                             std::to_string(l),
                         in, out, true});
        in = out;
      }
      concat += lvl.scales[s].widths.back();
    }
    if (cfg.use_global_coords && lvl.g_width > 0) {
      table.push_back({"pfe" + std::to_string(i) + ".g", concat + cfg.dim, lvl.g_width, true});
    }
  }

  int cur = level_w[levels];
  for (int i = 0; i < levels; ++i) {
    const int dst = levels - i - 1;
    int in = cur + (dst >= 1 ? level_w[dst] : 0);
    for (size_t l = 0; l < cfg.pfp[i].size(); ++l) {
      const int out = cfg.pfp[i][l];
      table.push_back({"pfp" + std::to_string(i) + ".fc" + std::to_string(l), in, out, true});
      in = out;
    }
    cur = cfg.pfp[i].back();
  }

  auto head = [&](const std::string& name, const std::vector<int>& widths) {
    int in = cur;
    for (size_t l = 0; l < widths.size(); ++l) {
      const bool last = l + 1 == widths.size();
      table.push_back({name + ".fc" + std::to_string(l), in, widths[l], !last});
      in = widths[l];
    }
  };
  head("embed", cfg.head_embed);
  head("sem", cfg.head_semantic);
  return table;
}

template <typename T>
struct ModelParams {
  std::vector<std::pair<std::string, ad::Tensor<T>>> entries;
  std::unordered_map<std::string, size_t> by_name;

  void add(const std::string& name, ad::Tensor<T> t) {
    t.set_name(name);
    by_name[name] = entries.size();
    entries.emplace_back(name, std::move(t));
  }

  ad::Tensor<T>& at(const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("ModelParams: unknown parameter " + name);
    return entries[it->second].second;
  }

  std::vector<ad::Tensor<T>> trainable() const {
    std::vector<ad::Tensor<T>> out;
    for (const auto& [name, t] : entries)
      if (t.requires_grad()) out.push_back(t);
    return out;
  }

  int64_t scalar_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : entries) n += static_cast<int64_t>(t.count());
    return n;
  }

  int64_t trainable_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : entries)
      if (t.requires_grad()) n += static_cast<int64_t>(t.count());
    return n;
  }
};

// Fan-in-scaled uniform weights, zero biases, identity batchnorm. Draw order
// follows fc_table, so identical (cfg, seed) gives identical parameters.
template <typename T>
ModelParams<T> init_params(const NetworkConfig& cfg, uint64_t seed) {
  ModelParams<T> params;
  Rng rng(mix_seed(seed, 0xF17));
  for (const FcSpec& spec : fc_table(cfg)) {
    const double bound = std::sqrt(1.0 / spec.in);
    std::vector<T> w(static_cast<size_t>(spec.in) * spec.out);
    for (auto& x : w) x = static_cast<T>(rng.uniform(-bound, bound));
    params.add(spec.name + ".w", ad::Tensor<T>::from(spec.in, spec.out, std::move(w), true));
    params.add(spec.name + ".b", ad::Tensor<T>::zeros(1, spec.out, true));
    if (spec.bn) {
      params.add(spec.name + ".bn.gamma", ad::Tensor<T>::full(1, spec.out, T(1)));
      params.at(spec.name + ".bn.gamma").set_requires_grad(true);
      params.add(spec.name + ".bn.beta", ad::Tensor<T>::zeros(1, spec.out, true));
      params.add(spec.name + ".bn.rmean", ad::Tensor<T>::zeros(1, spec.out));
      params.add(spec.name + ".bn.rvar", ad::Tensor<T>::full(1, spec.out, T(1)));
    }
  }
  return params;
}

// ---- sampling / grouping plans ----

// Index plans for one forward pass. All indices address the stacked
// (batch-concatenated) row layout of their level. Plans depend only on the
// input coordinates, so they are computed once per structure and reused
// across training steps.
struct NetPlans {
  struct Level {
    std::vector<std::vector<int>> scale_neighbors;  // per scale: (B*K*mk) row gathers
    std::vector<std::vector<double>> scale_rel;     // per scale: relative coords
    std::vector<int> scale_mk;                      // group size per scale
  };
  int batch = 1;
  std::vector<PointArray> level_coords;  // stacked coords per level, 0..L
  std::vector<Level> levels;             // per PFE level
  std::vector<pts::InterpPlan> interp;   // per PFP stage
};

namespace detail {

// Sampling, grouping and relative frames for one sample at one PFE level.
// Row indices are sample-local; callers offset them into the stacked layout.
struct LevelSamplePlan {
  std::vector<int> centroids;
  std::vector<std::vector<int>> scale_neighbors;
  std::vector<std::vector<double>> scale_rel;
  std::vector<int> scale_mk;
};

inline LevelSamplePlan build_level_sample_plan(const PointArray& coords,
                                               const PfeLevelConfig& lvl, double base_radius) {
  const int n = coords.size();
  if (lvl.k > n) throw DataError("pfe: centroid count exceeds point count");
  LevelSamplePlan plan;
  plan.centroids = pts::farthest_point_sample(coords, lvl.k);

  PointArray cents(coords.dim, lvl.k);
  for (int i = 0; i < lvl.k; ++i) {
    std::copy_n(coords.row(plan.centroids[i]), coords.dim, cents.row(i));
  }

  for (const auto& scale : lvl.scales) {
    if (lvl.group_all) {
      // One group holding the whole level in storage order. Storage order is
      // canonical above level 0 (it comes from farthest point sampling).
      pts::NeighborIndex nbr;
      nbr.centroid_indices = {plan.centroids[0]};
      nbr.max_k = n;
      nbr.neighbors.resize(n);
      for (int i = 0; i < n; ++i) nbr.neighbors[i] = i;
      plan.scale_neighbors.push_back(nbr.neighbors);
      plan.scale_rel.push_back(pts::relative_coords(coords, nbr));
      plan.scale_mk.push_back(n);
    } else {
      const pts::NeighborIndex nbr =
          pts::ball_query(coords, plan.centroids, scale.radius_mult * base_radius, lvl.max_k);
      plan.scale_neighbors.push_back(nbr.neighbors);
      plan.scale_rel.push_back(pts::relative_coords(coords, nbr));
      plan.scale_mk.push_back(lvl.max_k);
    }
  }
  return plan;
}

}  // namespace detail

inline NetPlans build_plans(const std::vector<const PointArray*>& samples,
                            const NetworkConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw DataError("build_plans: no samples");
  for (const PointArray* s : samples) {
    if (s->size() != cfg.n_points || s->dim != cfg.dim) {
      throw DataError("build_plans: sample shape does not match the network config");
    }
  }

  NetPlans plans;
  plans.batch = static_cast<int>(samples.size());
  const int levels = static_cast<int>(cfg.pfe.size());
  const int b = plans.batch;

  PointArray stacked(cfg.dim);
  for (const PointArray* s : samples) {
    stacked.data.insert(stacked.data.end(), s->data.begin(), s->data.end());
  }
  plans.level_coords.push_back(std::move(stacked));

  std::vector<PointArray> sample_coords;
  sample_coords.reserve(samples.size());
  for (const PointArray* s : samples) sample_coords.push_back(*s);

  for (int li = 0; li < levels; ++li) {
    const auto& lvl = cfg.pfe[li];
    const int prev_n = sample_coords[0].size();
    NetPlans::Level level;
    level.scale_neighbors.assign(lvl.scales.size(), {});
    level.scale_rel.assign(lvl.scales.size(), {});
    level.scale_mk.assign(lvl.scales.size(), 0);

    PointArray next_stacked(cfg.dim);
    std::vector<PointArray> next_samples;
    next_samples.reserve(samples.size());

    for (int s = 0; s < b; ++s) {
      const detail::LevelSamplePlan sp =
          detail::build_level_sample_plan(sample_coords[s], lvl, cfg.base_radius);
      const int offset = s * prev_n;
      for (size_t sc = 0; sc < lvl.scales.size(); ++sc) {
        level.scale_mk[sc] = sp.scale_mk[sc];
        for (const int idx : sp.scale_neighbors[sc]) {
          level.scale_neighbors[sc].push_back(offset + idx);
        }
        level.scale_rel[sc].insert(level.scale_rel[sc].end(), sp.scale_rel[sc].begin(),
                                   sp.scale_rel[sc].end());
      }
      PointArray cents(cfg.dim, lvl.k);
      for (int i = 0; i < lvl.k; ++i) {
        std::copy_n(sample_coords[s].row(sp.centroids[i]), cfg.dim, cents.row(i));
      }
      next_stacked.data.insert(next_stacked.data.end(), cents.data.begin(), cents.data.end());
      next_samples.push_back(std::move(cents));
    }
    plans.levels.push_back(std::move(level));
    plans.level_coords.push_back(std::move(next_stacked));
    sample_coords = std::move(next_samples);
  }

  // PFP interpolation stencils, per stage, sample-local then offset.
  for (int i = 0; i < levels; ++i) {
    const int src = levels - i;
    const int dst = levels - i - 1;
    const int src_n = plans.level_coords[src].size() / b;
    const int dst_n = plans.level_coords[dst].size() / b;
    pts::InterpPlan merged;
    merged.n_dst = dst_n * b;
    for (int s = 0; s < b; ++s) {
      PointArray src_pts(cfg.dim, src_n), dst_pts(cfg.dim, dst_n);
      std::copy_n(plans.level_coords[src].row(s * src_n), static_cast<size_t>(src_n) * cfg.dim,
                  src_pts.row(0));
      std::copy_n(plans.level_coords[dst].row(s * dst_n), static_cast<size_t>(dst_n) * cfg.dim,
                  dst_pts.row(0));
      const pts::InterpPlan sp = pts::interpolation_plan(src_pts, dst_pts);
      merged.k = sp.k;
      for (size_t q = 0; q < sp.indices.size(); ++q) {
        merged.indices.push_back(sp.indices[q] + s * src_n);
        merged.weights.push_back(sp.weights[q]);
      }
    }
    plans.interp.push_back(std::move(merged));
  }
  return plans;
}

// ---- forward ----

template <typename T>
struct Prediction {
  ad::Tensor<T> embeddings;  // (B*N) x embed_dim
  ad::Tensor<T> logits;      // (B*N) x 3
};

namespace detail {

template <typename T>
ad::Tensor<T> fc_block(ad::Tensor<T> x, ModelParams<T>& p, const std::string& name, bool bn,
                       bool act, bool train) {
  x = ad::add_rowvec(ad::matmul(x, p.at(name + ".w")), p.at(name + ".b"));
  if (bn) {
    x = ad::batchnorm(x, p.at(name + ".bn.gamma"), p.at(name + ".bn.beta"),
                      p.at(name + ".bn.rmean"), p.at(name + ".bn.rvar"), train);
  }
  if (act) x = ad::relu(x);
  return x;
}

template <typename T>
ad::Tensor<T> apply_pfe_level(const NetworkConfig& cfg, int level, const NetPlans::Level& lp,
                              const PointArray& centroid_coords,
                              const std::optional<ad::Tensor<T>>& feats, ModelParams<T>& params,
                              bool train) {
  const auto& lvl = cfg.pfe[level];
  const std::string prefix = "pfe" + std::to_string(level);
  std::optional<ad::Tensor<T>> pooled;
  for (size_t sc = 0; sc < lvl.scales.size(); ++sc) {
    const int mk = lp.scale_mk[sc];
    const int rows = static_cast<int>(lp.scale_neighbors[sc].size());
    ad::Tensor<T> grouped = ad::Tensor<T>::template from_cast<double>(rows, cfg.dim,
                                                                      lp.scale_rel[sc]);
    if (feats) {
      grouped = ad::concat_cols(grouped, ad::gather_rows(*feats, lp.scale_neighbors[sc]));
    }
    for (size_t l = 0; l < lvl.scales[sc].widths.size(); ++l) {
      grouped = fc_block(grouped, params, prefix + ".s" + std::to_string(sc) + ".fc" +
                                             std::to_string(l),
                         true, true, train);
    }
    ad::Tensor<T> mx = ad::group_max(grouped, mk);
    pooled = pooled ? ad::concat_cols(*pooled, mx) : mx;
  }
  if (cfg.use_global_coords && lvl.g_width > 0) {
    ad::Tensor<T> withc = ad::concat_cols(*pooled, ad::constant_from_points<T>(centroid_coords));
    return fc_block(withc, params, prefix + ".g", true, true, train);
  }
  return *pooled;
}

template <typename T>
ad::Tensor<T> apply_pfp_stage(const NetworkConfig& cfg, int stage, const ad::Tensor<T>& src_feats,
                              const pts::InterpPlan& plan,
                              const std::optional<ad::Tensor<T>>& skip_feats,
                              ModelParams<T>& params, bool train) {
  ad::Tensor<T> cur = ad::interp_rows(src_feats, plan);
  if (skip_feats) cur = ad::concat_cols(cur, *skip_feats);
  for (size_t l = 0; l < cfg.pfp[stage].size(); ++l) {
    cur = fc_block(cur, params, "pfp" + std::to_string(stage) + ".fc" + std::to_string(l), true,
                   true, train);
  }
  return cur;
}

template <typename T>
ad::Tensor<T> apply_head(const NetworkConfig& cfg, const std::string& name,
                         const std::vector<int>& widths, const ad::Tensor<T>& in,
                         ModelParams<T>& params, bool train) {
  (void)cfg;
  ad::Tensor<T> cur = in;
  for (size_t l = 0; l < widths.size(); ++l) {
    const bool last = l + 1 == widths.size();
    cur = fc_block(cur, params, name + ".fc" + std::to_string(l), !last, !last, train);
  }
  return cur;
}

}  // namespace detail

template <typename T>
Prediction<T> branchnet_forward(const NetPlans& plans, ModelParams<T>& params,
                                const NetworkConfig& cfg, bool train) {
  const int levels = static_cast<int>(cfg.pfe.size());
  std::vector<std::optional<ad::Tensor<T>>> feats(levels + 1);  // feats[0] stays empty

  for (int i = 0; i < levels; ++i) {
    feats[i + 1] = detail::apply_pfe_level(cfg, i, plans.levels[i], plans.level_coords[i + 1],
                                           feats[i], params, train);
  }

  ad::Tensor<T> cur = *feats[levels];
  for (int i = 0; i < levels; ++i) {
    const int dst = levels - i - 1;
    cur = detail::apply_pfp_stage(cfg, i, cur, plans.interp[i],
                                  dst >= 1 ? feats[dst] : std::optional<ad::Tensor<T>>{}, params,
                                  train);
  }

  Prediction<T> pred;
  pred.embeddings = detail::apply_head(cfg, "embed", cfg.head_embed, cur, params, train);
  pred.logits = detail::apply_head(cfg, "sem", cfg.head_semantic, cur, params, train);
  return pred;
}

// Single-sample conveniences mirroring the two stage contracts.

template <typename T>
struct PfeResult {
  PointArray sub_coords;
  ad::Tensor<T> sub_feats;
};

template <typename T>
PfeResult<T> pfe_forward(const NetworkConfig& cfg, int level, const PointArray& coords,
                         const std::optional<ad::Tensor<T>>& feats, ModelParams<T>& params,
                         bool train) {
  const auto& lvl = cfg.pfe[level];
  const detail::LevelSamplePlan sp =
      detail::build_level_sample_plan(coords, lvl, cfg.base_radius);
  NetPlans::Level level_plan;
  level_plan.scale_neighbors = sp.scale_neighbors;
  level_plan.scale_rel = sp.scale_rel;
  level_plan.scale_mk = sp.scale_mk;

  PfeResult<T> out;
  out.sub_coords = PointArray(coords.dim, lvl.k);
  for (int i = 0; i < lvl.k; ++i) {
    std::copy_n(coords.row(sp.centroids[i]), coords.dim, out.sub_coords.row(i));
  }
  out.sub_feats =
      detail::apply_pfe_level(cfg, level, level_plan, out.sub_coords, feats, params, train);
  return out;
}

template <typename T>
ad::Tensor<T> pfp_forward(const NetworkConfig& cfg, int stage, const PointArray& src_coords,
                          const ad::Tensor<T>& src_feats, const PointArray& dst_coords,
                          const std::optional<ad::Tensor<T>>& skip_feats, ModelParams<T>& params,
                          bool train) {
  const pts::InterpPlan plan = pts::interpolation_plan(src_coords, dst_coords);
  return detail::apply_pfp_stage(cfg, stage, src_feats, plan, skip_feats, params, train);
}

// ---- checkpoints ----

template <typename T>
void save_checkpoint(const std::string& path, const NetworkConfig& cfg,
                     const ModelParams<T>& params) {
  ad::save_weights<T>(path, params.entries, {{"network", cfg.to_json()}});
}

template <typename T>
std::pair<NetworkConfig, ModelParams<T>> load_checkpoint(const std::string& path) {
  ad::LoadedWeights<T> loaded = ad::load_weights<T>(path);
  if (!loaded.extra.contains("network")) {
    throw DataError("checkpoint missing network config: " + path);
  }
  const NetworkConfig cfg = NetworkConfig::from_json(loaded.extra.at("network"));

  // Shape agreement against a freshly derived layer table.
  ModelParams<T> expected = init_params<T>(cfg, 0);
  if (expected.entries.size() != loaded.tensors.size()) {
    throw DataError("checkpoint parameter list does not match its config: " + path);
  }
  ModelParams<T> params;
  for (size_t i = 0; i < loaded.tensors.size(); ++i) {
    auto& [name, tensor] = loaded.tensors[i];
    const auto& [exp_name, exp_tensor] = expected.entries[i];
    if (name != exp_name || tensor.rows() != exp_tensor.rows() ||
        tensor.cols() != exp_tensor.cols()) {
      throw DataError("checkpoint shape mismatch at " + name + " in " + path);
    }
    tensor.set_requires_grad(exp_tensor.requires_grad());
    params.add(name, tensor);
  }
  return {cfg, std::move(params)};
}

}  // namespace branchtopo::net
