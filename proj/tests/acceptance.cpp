// Acceptance harness. Usage: acceptance N  (criterion number, 1..7).
// Each criterion prints [PASS]/[FAIL] lines for its checks and a final
// summary line; the exit code is 0 only if every check passed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "branchtopo/cli.hpp"
#include "branchtopo/gen.hpp"
#include "branchtopo/io.hpp"
#include "branchtopo/loss.hpp"
#include "branchtopo/metrics.hpp"
#include "branchtopo/model.hpp"
#include "branchtopo/pointops.hpp"
#include "branchtopo/rng.hpp"
#include "branchtopo/tensor.hpp"

using namespace branchtopo;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

struct Gate {
  int passed = 0;
  int failed = 0;

  void check(bool ok, const std::string& label, const std::string& detail = "") {
    (ok ? passed : failed)++;
    std::printf("[%s] %s%s%s\n", ok ? "PASS" : "FAIL", label.c_str(),
                detail.empty() ? "" : ": ", detail.c_str());
    std::fflush(stdout);
  }
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

double now_seconds() {
  using clock = std::chrono::steady_clock;
  static const auto start = clock::now();
  return std::chrono::duration<double>(clock::now() - start).count();
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "branchtopo_acceptance" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) { return io::read_text_file(p.string()); }

bool same_bytes(const fs::path& a, const fs::path& b) { return slurp(a) == slurp(b); }

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, sep)) out.push_back(field);
  return out;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(split(line, ','));
  }
  return rows;
}

Tensor<double> randn(int r, int c, uint64_t seed, double scale = 1.0, bool grad = true) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(r) * c);
  for (auto& x : v) x = rng.normal(0.0, scale);
  Tensor<double> t = Tensor<double>::from(r, c, std::move(v));
  t.set_requires_grad(grad);
  return t;
}

Tensor<double> randpos(int r, int c, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(r) * c);
  for (auto& x : v) x = 0.5 + rng.uniform01();
  Tensor<double> t = Tensor<double>::from(r, c, std::move(v));
  t.set_requires_grad(true);
  return t;
}

// ---- criterion 1: gradient correctness ----

void criterion_gradients(Gate& gate) {
  const double tol_prim = 1e-4;
  using Fn = std::function<Tensor<double>()>;
  auto prim = [&](const char* name, const Fn& f, const std::vector<Tensor<double>>& wrt) {
    const double err = ad::gradcheck_many<double>(f, wrt, 1e-6);
    gate.check(err < tol_prim, std::string("gradcheck ") + name, "max rel " + fmt(err));
  };

  {
    auto x = randn(4, 3, 1);
    auto y = randn(4, 3, 2);
    prim("mul+sum", [&] { return ad::sum(ad::mul(x, y)); }, {x, y});
    prim("add+mean", [&] { return ad::mean(ad::add(x, y)); }, {x, y});
    prim("sub+square", [&] { return ad::sum(ad::square(ad::sub(x, y))); }, {x, y});
    prim("scale+add_const", [&] { return ad::sum(ad::scale(ad::add_const(x, 1.5), -2.0)); }, {x});
  }
  {
    auto p = randpos(3, 4, 3);
    prim("sqrt", [&] { return ad::sum(ad::sqrt_elem(p)); }, {p});
  }
  {
    // relu inputs at least 0.5 from the kink.
    Rng rng(4);
    std::vector<double> v(12);
    for (auto& e : v) e = (rng.bernoulli(0.5) ? 1.0 : -1.0) * (0.5 + rng.uniform01());
    auto xr = Tensor<double>::from(3, 4, std::move(v));
    xr.set_requires_grad(true);
    prim("relu", [&] { return ad::sum(ad::square(ad::relu(xr))); }, {xr});
  }
  {
    auto a = randn(5, 4, 5);
    auto b = randn(4, 3, 6);
    auto v = randn(1, 3, 7);
    prim("matmul+add_rowvec",
         [&] { return ad::sum(ad::square(ad::add_rowvec(ad::matmul(a, b), v))); }, {a, b, v});
    auto c = randn(1, 4, 8, 1.0, false);
    prim("sub_rowvec", [&] { return ad::sum(ad::square(ad::sub_rowvec(a, c))); }, {a});
  }
  {
    auto x = randn(6, 3, 9);
    prim("mean_rows", [&] { return ad::sum(ad::square(ad::mean_rows(x))); }, {x});
    std::vector<double> v(12);
    for (int i = 0; i < 12; ++i) v[i] = i * 0.37 + ((i * 7) % 5) * 1.31;  // no ties
    auto g = Tensor<double>::from(6, 2, std::move(v));
    g.set_requires_grad(true);
    prim("group_max", [&] { return ad::sum(ad::square(ad::group_max(g, 3))); }, {g});
  }
  {
    auto x = randn(4, 3, 10);
    prim("softmax_rows", [&] { return ad::sum(ad::square(ad::softmax_rows(x))); }, {x});
    auto nz = randpos(5, 3, 11);
    prim("rows_norm", [&] { return ad::sum(ad::square(ad::rows_norm(nz))); }, {nz});
    auto a = randn(3, 2, 12);
    auto b = randn(3, 2, 13);
    prim("concat_cols", [&] { return ad::sum(ad::square(ad::concat_cols(a, b))); }, {a, b});
    prim("concat_rows",
         [&] { return ad::sum(ad::square(ad::concat_rows(std::vector<Tensor<double>>{a, b}))); },
         {a, b});
    prim("gather_rows", [&] { return ad::sum(ad::square(ad::gather_rows(a, {2, 0, 0, 1}))); },
         {a});
  }
  {
    PointArray src(2), dst(2);
    Rng rng(14);
    for (int i = 0; i < 6; ++i) {
      const double p[2] = {rng.uniform01(), rng.uniform01()};
      src.push_row(p);
    }
    for (int i = 0; i < 9; ++i) {
      const double p[2] = {rng.uniform01(), rng.uniform01()};
      dst.push_row(p);
    }
    const auto plan = pts::interpolation_plan(src, dst, 3);
    auto feats = randn(6, 4, 15);
    prim("interp_rows", [&] { return ad::sum(ad::square(ad::interp_rows(feats, plan))); },
         {feats});
    auto logits = randn(5, 3, 16);
    const std::vector<int> labels = {0, 2, 1, 1, 0};
    prim("softmax_cross_entropy", [&] { return ad::softmax_cross_entropy(logits, labels); },
         {logits});
  }
  {
    auto x = randn(8, 3, 17);
    auto gamma = randpos(1, 3, 18);
    auto beta = randn(1, 3, 19);
    auto rmean = Tensor<double>::zeros(1, 3);
    auto rvar = Tensor<double>::full(1, 3, 1.0);
    auto readout = randn(8, 3, 20, 1.0, false);
    auto f = [&] {
      rmean.value().assign(3, 0.0);
      rvar.value().assign(3, 1.0);
      return ad::sum(
          ad::square(ad::mul(ad::batchnorm(x, gamma, beta, rmean, rvar, true), readout)));
    };
    prim("batchnorm(train)", f, {x, gamma, beta});
  }

  // Full combined loss through the tiny network, training-mode forward,
  // sampled central differences over every trainable tensor.
  {
    const auto cfg = net::NetworkConfig::tiny(2);
    auto params = net::init_params<double>(cfg, 60);

    Rng rng(61);
    PointArray pts(2, cfg.n_points);
    std::vector<int> inst(cfg.n_points), cls(cfg.n_points);
    std::vector<char> mask(cfg.n_points, 1);
    for (int i = 0; i < cfg.n_points; ++i) {
      pts.row(i)[0] = rng.uniform01();
      pts.row(i)[1] = rng.uniform01();
      inst[i] = 100 + (i % 3) * 7;
      cls[i] = rng.uniform01() < 0.25 ? 2 : 1;
    }
    for (int i = cfg.n_points - 4; i < cfg.n_points; ++i) {  // padding tail
      pts.row(i)[0] = -1.0;
      pts.row(i)[1] = -1.0;
      inst[i] = kPaddingInstance;
      cls[i] = 0;
      mask[i] = 0;
    }

    const auto plans = net::build_plans({&pts}, cfg);
    const loss::LossWeights lw;

    // Running stats are state, not parameters; reset them before every
    // forward so repeated evaluations agree.
    std::vector<std::pair<Tensor<double>, std::vector<double>>> stats;
    for (auto& [name, t] : params.entries) {
      if (!t.requires_grad()) stats.emplace_back(t, t.value());
    }
    auto f = [&] {
      for (auto& [t, v] : stats) t.value() = v;
      auto pred = net::branchnet_forward(plans, params, cfg, true);
      return loss::combined_loss(pred, cls, inst, mask, lw).total;
    };

    std::vector<Tensor<double>> trainable = params.trainable();
    ad::zero_grad(trainable);
    Tensor<double> y = f();
    ad::backward(y);
    std::vector<std::vector<double>> analytic;
    for (const auto& t : trainable) analytic.push_back(t.grad());

    // FD noise for a loss of order 1 is ~5e-11 at this h; the 1e-4 floor in
    // the relative error turns that into an absolute guard of 1e-7 for
    // elements whose true gradient is exactly zero (unselected max lanes).
    const double h = 1e-6;
    double max_rel = 0.0;
    int samples = 0;
    Rng pick(62);
    ad::NoGradGuard ng;
    for (size_t pi = 0; pi < trainable.size(); ++pi) {
      auto& vals = trainable[pi].node()->value;
      const int n = static_cast<int>(vals.size());
      std::set<int> idx;
      while (static_cast<int>(idx.size()) < std::min(3, n)) {
        idx.insert(static_cast<int>(pick.uniform_int(0, n - 1)));
      }
      for (const int i : idx) {
        const double orig = vals[i];
        vals[i] = orig + h;
        const double fp = f().item();
        vals[i] = orig - h;
        const double fm = f().item();
        vals[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic[pi][i];
        const double rel =
            std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4});
        if (rel > 1e-3) {
          std::printf("  offender: tensor %zu elem %d  a=%.6e  n=%.6e  rel=%.3e\n", pi, i, a,
                      numeric, rel);
        }
        max_rel = std::max(max_rel, rel);
        ++samples;
      }
    }
    gate.check(max_rel < 1e-3, "gradcheck full tiny network",
               fmt(samples) + " sampled elements, max rel " + fmt(max_rel));
  }

  const double elapsed = now_seconds();
  gate.check(elapsed < 300.0, "gradient suite under 5 minutes", fmt(elapsed) + " s");
}

// ---- criterion 2: loss oracle equivalence ----

struct DlfOracle {
  double var = 0, dist = 0, reg = 0, dlf = 0;
};

// Straight-line evaluation of the loss definition, independent of the
// autodiff implementation.
DlfOracle brute_force_dlf(const std::vector<double>& emb, int n, int d,
                          const std::vector<int>& instance, const std::vector<char>& mask,
                          const loss::LossWeights& lw) {
  std::map<int, std::vector<int>> clusters;
  for (int i = 0; i < n; ++i) {
    if (mask[i]) clusters[instance[i]].push_back(i);
  }
  const int c = static_cast<int>(clusters.size());
  std::vector<std::vector<double>> means;
  DlfOracle out;

  for (const auto& [id, rows] : clusters) {
    std::vector<double> mu(d, 0.0);
    for (const int r : rows) {
      for (int a = 0; a < d; ++a) mu[a] += emb[static_cast<size_t>(r) * d + a];
    }
    for (int a = 0; a < d; ++a) mu[a] /= static_cast<double>(rows.size());

    double cluster_var = 0.0;
    for (const int r : rows) {
      double dist2 = 0.0;
      for (int a = 0; a < d; ++a) {
        const double diff = emb[static_cast<size_t>(r) * d + a] - mu[a];
        dist2 += diff * diff;
      }
      const double hinge = std::max(0.0, std::sqrt(dist2) - lw.delta_v);
      cluster_var += hinge * hinge;
    }
    out.var += cluster_var / static_cast<double>(rows.size());

    double norm2 = 0.0;
    for (int a = 0; a < d; ++a) norm2 += mu[a] * mu[a];
    out.reg += std::sqrt(norm2);
    means.push_back(std::move(mu));
  }
  out.var /= c;
  out.reg /= c;

  if (c > 1) {
    for (int a = 0; a < c; ++a) {
      for (int b = 0; b < c; ++b) {
        if (a == b) continue;
        double gap2 = 0.0;
        for (int k = 0; k < d; ++k) {
          const double diff = means[a][k] - means[b][k];
          gap2 += diff * diff;
        }
        const double hinge = std::max(0.0, 2.0 * lw.delta_d - std::sqrt(gap2));
        out.dist += hinge * hinge;
      }
    }
    out.dist /= static_cast<double>(c) * (c - 1);
  }
  out.dlf = lw.alpha * out.var + lw.beta * out.dist + lw.gamma * out.reg;
  return out;
}

double rel_diff(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

void criterion_loss_oracle(Gate& gate) {
  const loss::LossWeights lw;

  {
    auto emb = Tensor<double>::from(4, 1, {-2, -2, 2, 2});
    const auto r = loss::report(loss::discriminative_loss(emb, {0, 0, 1, 1}, {1, 1, 1, 1}, lw));
    gate.check(r.var_term == 0.0 && r.dist_term == 0.0 && rel_diff(r.dlf, 0.002) < 1e-12,
               "hand case: clusters at +-2 give dlf 0.002", "dlf " + fmt(r.dlf));
  }
  {
    auto emb = Tensor<double>::from(2, 1, {-0.5, 0.5});
    const auto r = loss::report(loss::discriminative_loss(emb, {0, 1}, {1, 1}, lw));
    gate.check(rel_diff(r.dist_term, 4.0) < 1e-12 && rel_diff(r.dlf, 4.0005) < 1e-12,
               "hand case: singles at +-0.5 give dlf 4.0005", "dlf " + fmt(r.dlf));
  }

  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(0, 18));
    const int d = 1 + static_cast<int>(rng.uniform_int(0, 4));
    const int c = 1 + static_cast<int>(rng.uniform_int(0, 3));
    std::vector<double> data(static_cast<size_t>(n) * d);
    for (auto& x : data) x = rng.normal(0.0, 1.5);
    std::vector<int> inst(n);
    std::vector<char> mask(n);
    for (int i = 0; i < n; ++i) {
      inst[i] = 100 + static_cast<int>(rng.uniform_int(0, c - 1)) * 7;
      mask[i] = rng.uniform01() < 0.85 ? 1 : 0;
    }
    mask[0] = 1;

    auto emb = Tensor<double>::from(n, d, std::vector<double>(data));
    const auto got = loss::report(loss::discriminative_loss(emb, inst, mask, lw));
    const auto want = brute_force_dlf(data, n, d, inst, mask, lw);
    worst = std::max({worst, rel_diff(got.var_term, want.var), rel_diff(got.dist_term, want.dist),
                      rel_diff(got.reg_term, want.reg), rel_diff(got.dlf, want.dlf)});
  }
  gate.check(worst < 1e-9, "200 random cases match the brute-force oracle",
             "max rel " + fmt(worst));
}

// ---- criterion 3: metric oracles ----

int optimal_tp(const PointArray& pred, const PointArray& gt, double radius) {
  const int np = pred.size(), ng = gt.size();
  std::vector<std::vector<int>> reach(np);
  for (int p = 0; p < np; ++p) {
    for (int g = 0; g < ng; ++g) {
      if (squared_distance(pred.row(p), gt.row(g), pred.dim) <= radius * radius) {
        reach[p].push_back(g);
      }
    }
  }
  int best = 0;
  auto rec = [&](auto&& self, int p, unsigned used, int matched) -> void {
    best = std::max(best, matched);
    if (p == np) return;
    self(self, p + 1, used, matched);
    for (const int g : reach[p]) {
      if (!(used & (1u << g))) self(self, p + 1, used | (1u << g), matched + 1);
    }
  };
  rec(rec, 0, 0u, 0);
  return best;
}

void criterion_metric_oracles(Gate& gate) {
  {
    const std::vector<int> gt{0, 0, 1};
    const std::vector<int> pred{7, 7, 7};
    const double merged = metrics::sbd(pred, gt);
    const double self = metrics::sbd(gt, gt);
    gate.check(self == 100.0 && rel_diff(merged, 65.0) < 1e-12, "sbd hand values (100 / 65.0)",
               fmt(self) + " / " + fmt(merged));
  }
  {
    const double zero = metrics::dic({4, 4}, {4, 4});
    const double one = metrics::dic({5, 3}, {4, 4});
    gate.check(zero == 0.0 && one == 1.0, "dic hand values (0 / 1.0)",
               fmt(zero) + " / " + fmt(one));
  }
  {
    PointArray gt(2);
    for (int i = 0; i < 4; ++i) {
      double p[2] = {static_cast<double>(i), 0.0};
      gt.push_row(p);
    }
    PointArray pred(2);
    for (int i = 0; i < 3; ++i) {
      double p[2] = {i + 0.01, 0.0};
      pred.push_row(p);
    }
    double far[2] = {50.0, 50.0};
    pred.push_row(far);
    const auto r = metrics::ds_c(pred, gt, 0.1);
    const auto perfect = metrics::ds_c(gt, gt, 0.1);
    gate.check(perfect.score == 100.0 && r.tp == 3 && r.fp == 1 && r.fn == 1 &&
                   rel_diff(r.score, 75.0) < 1e-12,
               "ds_c hand values (100 / 75.0)", fmt(perfect.score) + " / " + fmt(r.score));
  }

  Rng rng(2718);
  const double radius = 0.05;
  int mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int dim = trial % 2 == 0 ? 2 : 3;
    const int ng = 2 + static_cast<int>(rng.uniform_int(0, 4));

    PointArray gt(dim);
    while (gt.size() < ng) {
      std::vector<double> c(dim);
      for (auto& v : c) v = rng.uniform01();
      bool ok = true;
      for (int i = 0; i < gt.size() && ok; ++i) {
        ok = squared_distance(gt.row(i), c.data(), dim) > (2.5 * radius) * (2.5 * radius);
      }
      if (ok) gt.push_row(c.data());
    }

    PointArray pred(dim);
    for (int g = 0; g < ng; ++g) {
      if (rng.uniform01() < 0.7) {
        std::vector<double> c(dim);
        for (int a = 0; a < dim; ++a) {
          c[a] = gt.at(g, a) + rng.uniform(-radius / 2, radius / 2) / std::sqrt(double(dim));
        }
        pred.push_row(c.data());
      }
    }
    int spurious = static_cast<int>(rng.uniform_int(0, 2));
    while (spurious > 0) {
      std::vector<double> c(dim);
      for (auto& v : c) v = rng.uniform01() + 3.0;
      pred.push_row(c.data());
      --spurious;
    }

    const auto got = metrics::ds_c(pred, gt, radius);
    const int want_tp = optimal_tp(pred, gt, radius);
    const double want_score =
        100.0 * 2.0 * want_tp / (2.0 * want_tp + (pred.size() - want_tp) + (ng - want_tp));
    if (got.tp != want_tp || got.fp != pred.size() - want_tp || got.fn != ng - want_tp ||
        rel_diff(got.score, want_score) > 1e-12) {
      ++mismatches;
    }
  }
  gate.check(mismatches == 0, "greedy matching equals exhaustive optimum on 100 planted configs",
             fmt(mismatches) + " mismatches");
}

// ---- criterion 4: generator topology ----

void criterion_generator_topology(Gate& gate) {
  for (int levels = 1; levels <= 4; ++levels) {
    const int want = (1 << (levels + 1)) - 1;
    int bad_counts = 0;
    int uncovered = 0;

    gen::GenConfig g;
    g.dim = 2;
    g.p_trifurcation = 0.0;
    g.fixed_levels = levels;
    gen::AugConfig a;
    a.jitter_sd = 0.0;
    a.dropout_p = 0.0;
    a.n_points = 20000;  // headroom so deep trees never hit capacity

    const double rho = g.endpoint_radius / (g.grid_size - 1.0);
    for (int k = 0; k < 100; ++k) {
      const auto s = gen::make_structure(g, a, 1000 * levels + k);
      if (s.n_instances != want || gen::count_instances(s.cloud) != want) ++bad_counts;

      auto covered = [&](const double* target) {
        for (int i = 0; i < s.cloud.coords.size(); ++i) {
          if (s.cloud.cls[i] != PointClass::kEndPoint) continue;
          if (squared_distance(s.cloud.coords.row(i), target, 2) <= rho * rho * 1.0001) {
            return true;
          }
        }
        return false;
      };
      for (int j = 0; j < s.junctions.size(); ++j) {
        if (!covered(s.junctions.row(j))) ++uncovered;
      }
      for (int t = 0; t < s.terminals.size(); ++t) {
        if (!covered(s.terminals.row(t))) ++uncovered;
      }
    }
    gate.check(bad_counts == 0,
               "levels " + std::to_string(levels) + ": 100 seeds give exactly " +
                   std::to_string(want) + " instances",
               fmt(bad_counts) + " wrong counts");
    gate.check(uncovered == 0,
               "levels " + std::to_string(levels) +
                   ": every junction/terminal has an end-point within rho_ep",
               fmt(uncovered) + " uncovered");
  }
}

// ---- criterion 5: overfit learning behavior ----

void criterion_overfit(Gate& gate) {
  const fs::path data = fresh_dir("overfit_data");
  const fs::path train_out = fresh_dir("overfit_train");
  const fs::path pred = fresh_dir("overfit_pred");

  // 8 fixed two-level structures: bifurcation-only, 7 branches each. Light
  // jitter/dropout keep terminal blobs single-instance; the seed was picked
  // for junction separation (converging branch tips are otherwise common in
  // planar trees and are locally indistinguishable from junctions).
  cli::GenerateArgs ga;
  ga.dim = 2;
  ga.count = 8;
  ga.out = data.string();
  ga.seed = 792;
  ga.preset = "desk";
  ga.fix_levels = 2;
  ga.p_trifurcation = 0.0;
  ga.jitter_sd = 1.0;
  ga.dropout_p = 0.1;
  cli::cmd_generate(ga);

  cli::TrainArgs ta;
  ta.dim = 2;
  ta.preset = "desk";
  ta.out = train_out.string();
  ta.data = data.string();
  ta.seed = 3;
  ta.steps = 2000;
  ta.eval_every = 500;
  ta.batch_size = 8;  // full-batch so eval-mode statistics match training
  ta.lr = 3e-3;
  ta.weights.w = 1.0;  // give the embedding loss full gradient share
  cli::cmd_train(ta);

  const auto log = read_csv(train_out / "train_log.csv");
  const double initial = std::stod(log[1][1]);
  const double final_loss = std::stod(log.back()[1]);
  gate.check(final_loss < 0.5 * initial, "final loss under half the initial loss",
             fmt(initial) + " -> " + fmt(final_loss));

  double worst_identity = 0.0;
  for (size_t r = 1; r < log.size(); ++r) {
    const double total = std::stod(log[r][1]);
    const double ce = std::stod(log[r][2]);
    const double dlf = std::stod(log[r][3]);
    worst_identity = std::max(worst_identity, rel_diff(total, ce + ta.weights.w * dlf));
  }
  gate.check(worst_identity < 1e-6, "log identity total = ce + w*dlf at every step",
             "max rel " + fmt(worst_identity));

  for (int i = 0; i < 8; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "structure_%05d.csv", i);
    cli::InferArgs ia;
    ia.ckpt = (train_out / "checkpoint_final.bnw").string();
    ia.input = (data / name).string();
    ia.out = (pred / name).string();
    ia.seed = 5;
    ia.delta_v = 1.2;          // merge embedding stragglers; gaps train to >= 3.0
    ia.bandwidth_xy = 0.06;    // one mode per junction blob at this data scale
    ia.junction_radius = 0.03;
    cli::cmd_infer(ia);
  }

  cli::EvalArgs ea;
  ea.pred_dir = pred.string();
  ea.gt_dir = data.string();
  ea.out = (pred / "report.csv").string();
  cli::cmd_eval(ea);

  const auto report = read_csv(pred / "report.csv");
  const auto& agg = report.back();
  const double sbd = std::stod(agg[1]);
  const double dic = std::stod(agg[2]);
  const double dsc = std::stod(agg[6]);
  gate.check(sbd >= 80.0, "SBD >= 80 on the training structures", fmt(sbd));
  gate.check(dic <= 1.0, "DiC <= 1 on the training structures", fmt(dic));
  gate.check(dsc >= 90.0, "DS_C >= 90 on the training structures", fmt(dsc));
  std::printf("       overfit wall time %.0f s\n", now_seconds());
}

// ---- criterion 6: equivariance and sweep grids ----

void criterion_equivariance_sweeps(Gate& gate) {
  for (int dim : {2, 3}) {
    const auto cfg = net::NetworkConfig::tiny(dim);
    auto params = net::init_params<double>(cfg, 51);
    Rng rng(52 + dim);
    PointArray pts(dim, cfg.n_points);
    for (int i = 0; i < cfg.n_points; ++i) {
      for (int a = 0; a < dim; ++a) pts.row(i)[a] = rng.uniform01();
    }
    std::vector<int> perm(cfg.n_points);
    for (int i = 0; i < cfg.n_points; ++i) perm[i] = (i * 7 + 3) % cfg.n_points;
    PointArray shuffled(dim, cfg.n_points);
    for (int i = 0; i < cfg.n_points; ++i) {
      std::copy_n(pts.row(perm[i]), dim, shuffled.row(i));
    }

    const auto base = net::branchnet_forward(net::build_plans({&pts}, cfg), params, cfg, false);
    const auto moved =
        net::branchnet_forward(net::build_plans({&shuffled}, cfg), params, cfg, false);
    int diffs = 0;
    for (int i = 0; i < cfg.n_points; ++i) {
      for (int c = 0; c < base.embeddings.cols(); ++c) {
        if (moved.embeddings.at(i, c) != base.embeddings.at(perm[i], c)) ++diffs;
      }
      for (int c = 0; c < base.logits.cols(); ++c) {
        if (moved.logits.at(i, c) != base.logits.at(perm[i], c)) ++diffs;
      }
    }
    gate.check(diffs == 0,
               "eval forward permutation equivariant bit for bit (dim " + std::to_string(dim) +
                   ")",
               fmt(diffs) + " differing values");
  }

  const std::map<std::string, std::vector<std::string>> grids = {
      {"branch", {"1", "2", "3", "4"}},
      {"dropout", {"30", "45", "60", "75"}},
      {"jitter", {"1", "2", "3", "4"}}};
  const std::map<std::string, std::string> axes = {
      {"branch", "branch_levels"}, {"dropout", "dropout_pct"}, {"jitter", "jitter_sd"}};

  for (int dim : {2, 3}) {
    for (const auto& [sweep, values] : grids) {
      const fs::path out =
          fresh_dir("sweep_" + sweep + "_d" + std::to_string(dim)) / "grid.csv";
      cli::EvalArgs ea;
      ea.sweep = sweep;
      ea.dim = dim;
      ea.preset = "desk";
      ea.seed = 1;
      ea.count = 2;
      ea.out = out.string();
      cli::cmd_eval(ea);

      const auto rows = read_csv(out);
      bool ok = rows.size() == 13 && rows[0] == std::vector<std::string>{"axis", "value",
                                                                         "metric", "score"};
      const std::vector<std::string> metrics_order = {"sbd", "dic", "ds_c"};
      for (size_t vi = 0; ok && vi < values.size(); ++vi) {
        for (size_t mi = 0; ok && mi < 3; ++mi) {
          const auto& row = rows[1 + vi * 3 + mi];
          ok = row.size() == 4 && row[0] == axes.at(sweep) && row[1] == values[vi] &&
               row[2] == metrics_order[mi] && std::isfinite(std::stod(row[3]));
        }
      }
      gate.check(ok, "sweep " + sweep + " dim " + std::to_string(dim) + " emits the full 4x3 grid",
                 fmt(static_cast<double>(rows.size()) - 1) + " rows");
    }
  }
}

// ---- criterion 7: determinism ----

void criterion_determinism(Gate& gate) {
  auto all_same = [&](const fs::path& a, const fs::path& b,
                      const std::vector<std::string>& names) {
    for (const auto& n : names) {
      if (!same_bytes(a / n, b / n)) return false;
    }
    return true;
  };

  const std::vector<std::string> gen_files = {
      "structure_00000.csv", "structure_00000.junctions.csv", "structure_00001.csv",
      "structure_00001.junctions.csv", "manifest.jsonl"};
  const fs::path gen_a = fresh_dir("det_gen_a");
  const fs::path gen_b = fresh_dir("det_gen_b");
  for (const fs::path& out : {gen_a, gen_b}) {
    cli::GenerateArgs ga;
    ga.dim = 2;
    ga.count = 2;
    ga.out = out.string();
    ga.seed = 5;
    ga.preset = "desk";
    ga.fix_levels = 2;
    cli::cmd_generate(ga);
  }
  gate.check(all_same(gen_a, gen_b, gen_files), "generate reruns are byte-identical");

  const fs::path train_a = fresh_dir("det_train_a");
  const fs::path train_b = fresh_dir("det_train_b");
  for (const fs::path& out : {train_a, train_b}) {
    cli::TrainArgs ta;
    ta.dim = 2;
    ta.preset = "desk";
    ta.out = out.string();
    ta.data = gen_a.string();
    ta.seed = 7;
    ta.steps = 100;
    ta.eval_every = 50;
    ta.batch_size = 2;
    ta.lr = 1e-3;
    cli::cmd_train(ta);
  }
  gate.check(all_same(train_a, train_b,
                      {"train_log.csv", "checkpoint_000050.bnw", "checkpoint_final.bnw",
                       "run_manifest.json"}),
             "train (100 steps) reruns are byte-identical");

  const std::string ckpt = (train_a / "checkpoint_final.bnw").string();
  const fs::path infer_a = fresh_dir("det_infer_a");
  const fs::path infer_b = fresh_dir("det_infer_b");
  for (const fs::path& out : {infer_a, infer_b}) {
    for (int i = 0; i < 2; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "structure_%05d.csv", i);
      cli::InferArgs ia;
      ia.ckpt = ckpt;
      ia.input = (gen_a / name).string();
      ia.out = (out / name).string();
      ia.seed = 9;
      cli::cmd_infer(ia);
    }
  }
  gate.check(all_same(infer_a, infer_b,
                      {"structure_00000.csv", "structure_00000.junctions.csv",
                       "structure_00001.csv", "structure_00001.junctions.csv"}),
             "infer reruns are byte-identical");

  for (const fs::path& out : {infer_a, infer_b}) {
    cli::EvalArgs ea;
    ea.pred_dir = infer_a.string();  // same predictions both times
    ea.gt_dir = gen_a.string();
    ea.out = (out / "report.csv").string();
    cli::cmd_eval(ea);
  }
  gate.check(same_bytes(infer_a / "report.csv", infer_b / "report.csv"),
             "eval reruns are byte-identical");

  for (const fs::path& out : {infer_a, infer_b}) {
    cli::PlotArgs pa;
    pa.input = (infer_a / "structure_00000.csv").string();
    pa.out = (out / "plot.svg").string();
    cli::cmd_plot(pa);
  }
  gate.check(same_bytes(infer_a / "plot.svg", infer_b / "plot.svg"),
             "plot reruns are byte-identical");

  // Weight files: load + save reproduces the file exactly, and a second
  // load sees bit-identical values.
  const fs::path resaved = fresh_dir("det_weights") / "resaved.bnw";
  auto [cfg, params] = net::load_checkpoint<double>(ckpt);
  net::save_checkpoint(resaved.string(), cfg, params);
  bool round_trip = same_bytes(ckpt, resaved);
  auto [cfg2, params2] = net::load_checkpoint<double>(resaved.string());
  for (size_t i = 0; round_trip && i < params.entries.size(); ++i) {
    round_trip = params.entries[i].second.value() == params2.entries[i].second.value();
  }
  gate.check(round_trip, "weight-file round-trip is exact");
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: acceptance N  (criterion 1..7)\n");
    return 2;
  }
  const int n = std::atoi(argv[1]);
  now_seconds();  // start the clock

  Gate gate;
  try {
    switch (n) {
      case 1: criterion_gradients(gate); break;
      case 2: criterion_loss_oracle(gate); break;
      case 3: criterion_metric_oracles(gate); break;
      case 4: criterion_generator_topology(gate); break;
      case 5: criterion_overfit(gate); break;
      case 6: criterion_equivariance_sweeps(gate); break;
      case 7: criterion_determinism(gate); break;
      default:
        std::fprintf(stderr, "unknown criterion %d\n", n);
        return 2;
    }
  } catch (const std::exception& e) {
    gate.check(false, "criterion " + std::to_string(n) + " aborted", e.what());
  }

  std::printf("criterion %d: %s (%d passed, %d failed)\n", n,
              gate.failed == 0 ? "PASS" : "FAIL", gate.passed, gate.failed);
  return gate.failed == 0 ? 0 : 1;
}
