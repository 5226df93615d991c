#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <vector>

#include "branchtopo/model.hpp"
#include "branchtopo/rng.hpp"

using namespace branchtopo;
using net::NetworkConfig;

namespace {

PointArray random_points(int n, int dim, uint64_t seed) {
  Rng rng(seed);
  PointArray pts(dim, n);
  for (int i = 0; i < n; ++i) {
    for (int a = 0; a < dim; ++a) pts.row(i)[a] = rng.uniform01();
  }
  return pts;
}

ad::Tensor<double> random_feats(int rows, int cols, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(rows) * cols);
  for (auto& x : v) x = rng.normal(0.0, 1.0);
  return ad::Tensor<double>::from(rows, cols, std::move(v));
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("fc_table chains widths and ends heads without batchnorm") {
  for (const auto& cfg : {NetworkConfig::paper(3), NetworkConfig::desk(2), NetworkConfig::tiny(2)}) {
    const auto table = net::fc_table(cfg);
    // Layer inputs chain onto the previous output inside every named stage.
    for (size_t i = 1; i < table.size(); ++i) {
      const auto& prev = table[i - 1];
      const auto& cur = table[i];
      const auto stage = [](const std::string& s) { return s.substr(0, s.rfind('.')); };
      if (stage(prev.name) == stage(cur.name)) CHECK(cur.in == prev.out);
    }
    int head_ends = 0;
    for (const auto& spec : table) {
      if (spec.name == "embed.fc1") {
        CHECK(spec.out == 15);
        CHECK_FALSE(spec.bn);
        ++head_ends;
      }
      if (spec.name == "sem.fc1") {
        CHECK(spec.out == 3);
        CHECK_FALSE(spec.bn);
        ++head_ends;
      }
    }
    CHECK(head_ends == 2);
  }
}

TEST_CASE("parameter counts match the frozen shape-walk goldens") {
  // Counted once by an independent walk over the documented width tables:
  // each fc layer holds in*out + out scalars, plus 4*out for batchnorm
  // (gamma, beta, running mean, running var), of which the running stats are
  // not trainable.
  auto p3 = net::init_params<double>(NetworkConfig::paper(3), 1);
  CHECK(p3.scalar_count() == 1685074);
  CHECK(p3.trainable_count() == 1674002);

  auto d3 = net::init_params<double>(NetworkConfig::desk(3), 1);
  CHECK(d3.scalar_count() == 429618);
  CHECK(d3.trainable_count() == 424082);

  auto t2 = net::init_params<double>(NetworkConfig::tiny(2), 1);
  CHECK(t2.scalar_count() == 29854);
  CHECK(t2.trainable_count() == 28470);

  // Without the g layers the concat widths flow straight through, which
  // changes both the table and the totals.
  auto base = NetworkConfig::tiny(2);
  base.use_global_coords = false;
  auto b2 = net::init_params<double>(base, 1);
  CHECK(b2.scalar_count() == 31118);
  CHECK(b2.trainable_count() == 29830);
}

TEST_CASE("init_params is deterministic and sets the documented start state") {
  const auto cfg = NetworkConfig::tiny(2);
  auto a = net::init_params<double>(cfg, 42);
  auto b = net::init_params<double>(cfg, 42);
  auto c = net::init_params<double>(cfg, 43);
  REQUIRE(a.entries.size() == b.entries.size());
  bool identical = true, differs_from_c = false;
  for (size_t i = 0; i < a.entries.size(); ++i) {
    identical = identical && a.entries[i].second.value() == b.entries[i].second.value();
    differs_from_c = differs_from_c || a.entries[i].second.value() != c.entries[i].second.value();
  }
  CHECK(identical);
  CHECK(differs_from_c);

  for (const auto& [name, t] : a.entries) {
    if (name.ends_with(".b") || name.ends_with(".bn.beta") || name.ends_with(".bn.rmean")) {
      for (double v : t.value()) CHECK(v == 0.0);
    }
    if (name.ends_with(".bn.gamma") || name.ends_with(".bn.rvar")) {
      for (double v : t.value()) CHECK(v == 1.0);
    }
    if (name.ends_with(".bn.rmean") || name.ends_with(".bn.rvar")) {
      CHECK_FALSE(t.requires_grad());
    } else {
      CHECK(t.requires_grad());
    }
  }

  // Head last layers carry no batchnorm state at all.
  CHECK(a.by_name.count("embed.fc0.bn.gamma") == 1);
  CHECK(a.by_name.count("embed.fc1.bn.gamma") == 0);
  CHECK(a.by_name.count("sem.fc1.bn.gamma") == 0);
}

TEST_CASE("one-scale toy pfe level matches the pencil-and-paper forward") {
  // 4 points, 2 centroids, one scale of a single width-2 fc, no g layer.
  NetworkConfig cfg;
  cfg.dim = 2;
  cfg.n_points = 4;
  cfg.base_radius = 0.2;
  cfg.use_global_coords = false;
  cfg.pfe = {{2, false, 2, {{1.0, {2}}}, 0}};
  cfg.pfp = {{2}};

  net::ModelParams<double> params;
  params.add("pfe0.s0.fc0.w", ad::Tensor<double>::from(2, 2, {1, 2, 3, 4}));
  params.add("pfe0.s0.fc0.b", ad::Tensor<double>::from(1, 2, {0.5, -0.25}));
  params.add("pfe0.s0.fc0.bn.gamma", ad::Tensor<double>::full(1, 2, 1.0));
  params.add("pfe0.s0.fc0.bn.beta", ad::Tensor<double>::zeros(1, 2));
  params.add("pfe0.s0.fc0.bn.rmean", ad::Tensor<double>::zeros(1, 2));
  params.add("pfe0.s0.fc0.bn.rvar", ad::Tensor<double>::full(1, 2, 1.0));

  PointArray pts(2, 4);
  const double coords[8] = {0, 0, 0.1, 0, 1, 0, 1, 1};
  std::copy_n(coords, 8, pts.row(0));

  const auto res = net::pfe_forward<double>(cfg, 0, pts, std::nullopt, params, false);

  // Farthest point sampling starts at (0,0) and then takes (1,1). The ball
  // around (0,0) holds itself and (0.1,0); the one around (1,1) only itself.
  REQUIRE(res.sub_coords.size() == 2);
  CHECK(res.sub_coords.at(0, 0) == 0.0);
  CHECK(res.sub_coords.at(1, 0) == 1.0);
  CHECK(res.sub_coords.at(1, 1) == 1.0);

  // Relative frames: (0,0),(0.1,0) and (0,0),(0,0) [padding repeats the
  // centroid]. After W=[[1,2],[3,4]], b=(0.5,-0.25), eval batchnorm divides
  // by sqrt(1+eps), relu clamps the negative column, max pools each pair.
  const double s = 1.0 / std::sqrt(1.0 + 1e-5);
  REQUIRE(res.sub_feats.rows() == 2);
  REQUIRE(res.sub_feats.cols() == 2);
  CHECK(res.sub_feats.at(0, 0) == doctest::Approx(0.6 * s).epsilon(1e-12));
  CHECK(res.sub_feats.at(0, 1) == 0.0);
  CHECK(res.sub_feats.at(1, 0) == doctest::Approx(0.5 * s).epsilon(1e-12));
  CHECK(res.sub_feats.at(1, 1) == 0.0);
}

TEST_CASE("group-all pfe level returns one row of the final scale width") {
  const auto cfg = NetworkConfig::paper(3);
  auto params = net::init_params<double>(cfg, 5);
  // Level 2 consumes the 128 level-1 centroids carrying 256 features each.
  const PointArray pts = random_points(128, 3, 7);
  const auto feats = random_feats(128, 256, 8);
  const auto res = net::pfe_forward<double>(cfg, 2, pts, feats, params, false);
  CHECK(res.sub_coords.size() == 1);
  CHECK(res.sub_feats.rows() == 1);
  CHECK(res.sub_feats.cols() == 1024);
}

TEST_CASE("pfe output is invariant to input point order") {
  const auto cfg = NetworkConfig::tiny(2);
  auto params = net::init_params<double>(cfg, 11);
  const PointArray pts = random_points(64, 2, 12);
  PointArray shuffled(2, 64);
  for (int i = 0; i < 64; ++i) {
    std::copy_n(pts.row((i * 7 + 3) % 64), 2, shuffled.row(i));
  }
  const auto a = net::pfe_forward<double>(cfg, 0, pts, std::nullopt, params, false);
  const auto b = net::pfe_forward<double>(cfg, 0, shuffled, std::nullopt, params, false);
  CHECK(a.sub_coords.data == b.sub_coords.data);
  CHECK(a.sub_feats.value() == b.sub_feats.value());
}

TEST_CASE("pfp stage equals interpolation plus fc chain, identity when src = dst") {
  const auto cfg = NetworkConfig::tiny(2);
  auto params = net::init_params<double>(cfg, 21);
  const PointArray src = random_points(4, 2, 22);
  const PointArray dst = random_points(16, 2, 23);
  const auto feats = random_feats(4, 128, 24);  // level-3 width at tiny scale

  // Direct formula: interpolate by hand, concat zero skip, run the fc chain.
  const auto plan = pts::interpolation_plan(src, dst);
  const auto lifted = pts::apply_interpolation(plan, feats.value(), 128);
  auto zero_skip = ad::Tensor<double>::zeros(16, 32);  // level-2 width
  const auto direct = net::pfp_forward<double>(cfg, 0, src, feats, dst, zero_skip, params, false);

  auto cur = ad::concat_cols(ad::Tensor<double>::from(16, 128, std::move(lifted)), zero_skip);
  for (int l = 0; l < 2; ++l) {
    const std::string name = "pfp0.fc" + std::to_string(l);
    cur = ad::add_rowvec(ad::matmul(cur, params.at(name + ".w")), params.at(name + ".b"));
    cur = ad::batchnorm(cur, params.at(name + ".bn.gamma"), params.at(name + ".bn.beta"),
                        params.at(name + ".bn.rmean"), params.at(name + ".bn.rvar"), false);
    cur = ad::relu(cur);
  }
  REQUIRE(direct.rows() == cur.rows());
  for (size_t i = 0; i < direct.count(); ++i) {
    CHECK(direct.value()[i] == doctest::Approx(cur.value()[i]).epsilon(1e-12));
  }

  // src == dst: the self weight 1/1e-8 dominates, so interpolation is the
  // identity up to ~1e-7.
  const auto self_plan = pts::interpolation_plan(src, src);
  const auto same = pts::apply_interpolation(self_plan, feats.value(), 128);
  for (size_t i = 0; i < same.size(); ++i) {
    CHECK(same[i] == doctest::Approx(feats.value()[i]).epsilon(1e-5));
  }
}

TEST_CASE("forward yields n_points x 15 embeddings and x3 logits per sample") {
  const auto cfg = NetworkConfig::tiny(2);
  auto params = net::init_params<double>(cfg, 31);
  const PointArray a = random_points(64, 2, 32);
  const PointArray b = random_points(64, 2, 33);
  const auto plans = net::build_plans({&a, &b}, cfg);
  auto pred = net::branchnet_forward(plans, params, cfg, false);
  CHECK(pred.embeddings.rows() == 128);
  CHECK(pred.embeddings.cols() == 15);
  CHECK(pred.logits.rows() == 128);
  CHECK(pred.logits.cols() == 3);
}

TEST_CASE("eval forward is batch-size independent") {
  const auto cfg = NetworkConfig::tiny(2);
  auto params = net::init_params<double>(cfg, 41);
  const PointArray a = random_points(64, 2, 42);
  const PointArray b = random_points(64, 2, 43);
  const auto joint = net::branchnet_forward(net::build_plans({&a, &b}, cfg), params, cfg, false);
  const auto solo_a = net::branchnet_forward(net::build_plans({&a}, cfg), params, cfg, false);
  const auto solo_b = net::branchnet_forward(net::build_plans({&b}, cfg), params, cfg, false);
  for (int i = 0; i < 64; ++i) {
    for (int c = 0; c < 15; ++c) {
      CHECK(joint.embeddings.at(i, c) == solo_a.embeddings.at(i, c));
      CHECK(joint.embeddings.at(64 + i, c) == solo_b.embeddings.at(i, c));
    }
    for (int c = 0; c < 3; ++c) {
      CHECK(joint.logits.at(i, c) == solo_a.logits.at(i, c));
      CHECK(joint.logits.at(64 + i, c) == solo_b.logits.at(i, c));
    }
  }
}

TEST_CASE("eval forward is permutation equivariant bit for bit") {
  const auto cfg = NetworkConfig::tiny(2);
  auto params = net::init_params<double>(cfg, 51);
  const PointArray pts = random_points(64, 2, 52);
  std::vector<int> perm(64);
  for (int i = 0; i < 64; ++i) perm[i] = (i * 7 + 3) % 64;
  PointArray shuffled(2, 64);
  for (int i = 0; i < 64; ++i) std::copy_n(pts.row(perm[i]), 2, shuffled.row(i));

  const auto base = net::branchnet_forward(net::build_plans({&pts}, cfg), params, cfg, false);
  const auto moved = net::branchnet_forward(net::build_plans({&shuffled}, cfg), params, cfg, false);
  for (int i = 0; i < 64; ++i) {
    for (int c = 0; c < 15; ++c) CHECK(moved.embeddings.at(i, c) == base.embeddings.at(perm[i], c));
    for (int c = 0; c < 3; ++c) CHECK(moved.logits.at(i, c) == base.logits.at(perm[i], c));
  }
}

TEST_CASE("translation invariance holds without global coords and breaks with them") {
  auto local_cfg = NetworkConfig::tiny(2);
  local_cfg.use_global_coords = false;
  auto global_cfg = NetworkConfig::tiny(2);

  auto local_params = net::init_params<double>(local_cfg, 61);
  auto global_params = net::init_params<double>(global_cfg, 61);

  const PointArray pts = random_points(64, 2, 62);
  PointArray moved(2, 64);
  for (int i = 0; i < 64; ++i) {
    for (int a = 0; a < 2; ++a) moved.row(i)[a] = pts.row(i)[a] + 0.5;
  }

  const auto l0 = net::branchnet_forward(net::build_plans({&pts}, local_cfg), local_params,
                                         local_cfg, false);
  const auto l1 = net::branchnet_forward(net::build_plans({&moved}, local_cfg), local_params,
                                         local_cfg, false);
  for (size_t i = 0; i < l0.embeddings.count(); ++i) {
    CHECK(l0.embeddings.value()[i] == doctest::Approx(l1.embeddings.value()[i]).epsilon(1e-9));
  }

  const auto g0 = net::branchnet_forward(net::build_plans({&pts}, global_cfg), global_params,
                                         global_cfg, false);
  const auto g1 = net::branchnet_forward(net::build_plans({&moved}, global_cfg), global_params,
                                         global_cfg, false);
  double max_diff = 0.0;
  for (size_t i = 0; i < g0.embeddings.count(); ++i) {
    max_diff = std::max(max_diff, std::abs(g0.embeddings.value()[i] - g1.embeddings.value()[i]));
  }
  CHECK(max_diff > 1e-6);
}

TEST_CASE("checkpoint round-trips config and float32-rounded parameters") {
  const std::string path = temp_path("branchtopo_test_ckpt.bnw");
  const auto cfg = NetworkConfig::tiny(3);
  auto params = net::init_params<double>(cfg, 71);
  net::save_checkpoint(path, cfg, params);

  auto [loaded_cfg, loaded] = net::load_checkpoint<double>(path);
  CHECK(loaded_cfg.to_json() == cfg.to_json());
  REQUIRE(loaded.entries.size() == params.entries.size());
  for (size_t i = 0; i < params.entries.size(); ++i) {
    CHECK(loaded.entries[i].first == params.entries[i].first);
    CHECK(loaded.entries[i].second.requires_grad() == params.entries[i].second.requires_grad());
    const auto& orig = params.entries[i].second.value();
    const auto& back = loaded.entries[i].second.value();
    REQUIRE(orig.size() == back.size());
    for (size_t j = 0; j < orig.size(); ++j) {
      CHECK(back[j] == static_cast<double>(static_cast<float>(orig[j])));
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("checkpoint loading rejects mismatched shapes and missing config") {
  const std::string path = temp_path("branchtopo_test_bad_ckpt.bnw");
  // Same layer names, different widths: the shape check must fire.
  auto desk_params = net::init_params<double>(NetworkConfig::desk(2), 1);
  net::save_checkpoint(path, NetworkConfig::tiny(2), desk_params);
  CHECK_THROWS_AS(net::load_checkpoint<double>(path), DataError);

  ad::save_weights<double>(path, desk_params.entries, nlohmann::json::object());
  CHECK_THROWS_AS(net::load_checkpoint<double>(path), DataError);
  std::remove(path.c_str());
}

TEST_CASE("network config json round-trip and validation errors") {
  auto cfg = NetworkConfig::desk(3);
  cfg.use_global_coords = false;
  const auto back = NetworkConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());

  auto bad_dim = NetworkConfig::tiny(2);
  bad_dim.dim = 4;
  CHECK_THROWS_AS(bad_dim.validate(), DataError);

  auto bad_stage = NetworkConfig::tiny(2);
  bad_stage.pfp.pop_back();
  CHECK_THROWS_AS(bad_stage.validate(), DataError);

  auto bad_k = NetworkConfig::tiny(2);
  bad_k.pfe[0].k = 65;  // exceeds n_points
  CHECK_THROWS_AS(bad_k.validate(), DataError);

  auto bad_head = NetworkConfig::tiny(2);
  bad_head.head_semantic = {16, 4};
  CHECK_THROWS_AS(bad_head.validate(), DataError);
}
