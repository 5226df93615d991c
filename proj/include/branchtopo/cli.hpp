#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "branchtopo/gen.hpp"
#include "branchtopo/loss.hpp"
#include "branchtopo/model.hpp"

namespace branchtopo::cli {

extern const char* kVersion;

// Hex digest of the version string, recorded in run manifests.
std::string code_hash();

// Worker cap from BRANCHTOPO_THREADS (falls back to the hardware count).
int parallelism();

// Runs fn(0..n-1); results must be written to per-index slots so the
// schedule cannot influence output.
void parallel_for(int n, const std::function<void(int)>& fn);

struct GenerateArgs {
  int dim = 2;
  int count = 1;
  std::string out;
  uint64_t seed = 0;
  std::string preset = "paper";
  std::string config;  // optional JSON file overriding the fields below
  int fix_levels = 0;
  bool fix_length = false;
  double jitter_sd = 3.0;
  double dropout_p = 0.4;
  int n_points = 0;  // 0 = preset default
  int grid = 0;      // 0 = preset default
  double p_trifurcation = 0.2;
  int max_levels = 4;
};
void cmd_generate(GenerateArgs args);

struct TrainArgs {
  int dim = 2;
  std::string preset = "paper";
  std::string out;
  std::string data;  // dataset directory; empty = fresh structures every batch
  std::string config;
  uint64_t seed = 0;
  int steps = 0;
  int eval_every = 500;
  int batch_size = 12;
  double lr = 1e-5;
  loss::LossWeights weights;
  // generation knobs for the on-the-fly regime
  int fix_levels = 0;
  bool fix_length = false;
  double jitter_sd = 3.0;
  double dropout_p = 0.4;
  double p_trifurcation = 0.2;
  int max_levels = 4;
};
void cmd_train(TrainArgs args);

struct InferArgs {
  std::string ckpt;
  std::string input;
  std::string out;
  std::string config;
  uint64_t seed = 0;
  double delta_v = 0.7;
  double bandwidth_xy = 0.0;     // 0 = scaled default from the checkpoint
  double junction_radius = 0.0;  // 0 = bandwidth_xy
};
void cmd_infer(InferArgs args);

struct EvalArgs {
  std::string pred_dir;
  std::string gt_dir;
  std::string out;
  std::string config;
  double match_radius = 0.0;  // 0 = scaled default from the dataset grid
  // sweep mode
  std::string sweep;  // branch | dropout | jitter
  std::string ckpt;   // optional; fresh initialization otherwise
  int dim = 2;
  std::string preset = "desk";
  uint64_t seed = 0;
  int count = 8;  // structures per sweep point
};
void cmd_eval(EvalArgs args);

struct PlotArgs {
  std::string input;
  std::string junctions;  // default: sibling .junctions.csv when present
  std::string out;
  std::string config;
  std::string project = "xy";
};
void cmd_plot(PlotArgs args);

int run_cli(int argc, char** argv);

}  // namespace branchtopo::cli
