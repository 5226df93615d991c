#pragma once

#include <cstdint>
#include <vector>

#include "branchtopo/common.hpp"

namespace branchtopo::gen {

// Morphology randomization parameters for the recursive growth process.
struct GenConfig {
  int dim = 2;                        // 2 or 3
  int max_levels = 4;                 // levels drawn uniformly in 1..max_levels
  double p_trifurcation = 0.2;        // else bifurcation
  double start_angle_min_deg = 0.0;   // child start angle off the parent direction
  double start_angle_max_deg = 90.0;
  double steps_mean = 20.0;
  double steps_sd = 8.0;
  double step_angle_sd_min_deg = 10.0;  // per-branch walk sd drawn uniformly
  double step_angle_sd_max_deg = 60.0;
  double step_len_max = 1.0;            // step length uniform in (0, step_len_max]
  int grid_size = 512;
  double endpoint_radius = 4.0;         // grid units; end-point class radius

  // Ablation switches.
  int fixed_levels = 0;     // > 0 forces the level count
  bool fixed_length = false;  // fixes step count to steps_mean and length to 0.5

  void validate() const;  // throws DataError on violated invariants
};

// Point-level augmentation parameters.
struct AugConfig {
  double jitter_sd = 3.0;   // pixels
  double dropout_p = 0.4;
  int n_points = 10000;     // fixed set size after padding
  uint64_t rng_seed = 0;

  void validate() const;
};

struct Branch {
  int id = 0;
  int parent_id = -1;  // -1 for the root
  int level = 0;
  PointArray polyline;  // ordered control points
};

struct TreeStructure {
  int dim = 2;
  std::vector<Branch> branches;  // ids are positions; parents precede children
  PointArray junctions;          // non-leaf branch ends
  PointArray terminals;          // leaf branch ends plus the root start
};

TreeStructure grow_tree(const GenConfig& cfg, uint64_t seed);

// Rasterization output with the junction/terminal coordinates carried into
// grid space (unrounded).
struct RasterResult {
  LabeledPointCloud cloud;
  PointArray junctions;
  PointArray terminals;
};

RasterResult rasterize_detailed(const TreeStructure& tree, const GenConfig& cfg, uint64_t seed);
LabeledPointCloud rasterize(const TreeStructure& tree, const GenConfig& cfg, uint64_t seed);

LabeledPointCloud augment(const LabeledPointCloud& cloud, const AugConfig& aug);

// Affine map applied by finalize: p' = (p - offset) * scale.
struct FinalizeTransform {
  std::vector<double> offset;
  double scale = 1.0;

  void apply(PointArray& pts) const;
};

struct FinalizeResult {
  LabeledPointCloud cloud;
  FinalizeTransform transform;
};

FinalizeResult finalize_detailed(const LabeledPointCloud& cloud, int n_points, uint64_t seed);
LabeledPointCloud finalize(const LabeledPointCloud& cloud, int n_points, uint64_t seed);

// One fully generated training structure in unit space.
struct StructureSample {
  LabeledPointCloud cloud;
  PointArray junctions;  // unit space
  PointArray terminals;  // unit space
  int n_instances = 0;
};

StructureSample make_structure(const GenConfig& cfg, const AugConfig& aug, uint64_t seed);

int count_instances(const LabeledPointCloud& cloud);

}  // namespace branchtopo::gen
