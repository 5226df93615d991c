#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "branchtopo/common.hpp"
#include "branchtopo/gen.hpp"

namespace branchtopo::io {

// Shortest representation that parses back to the same double.
std::string format_double(double v);

void save_cloud_csv(const std::string& path, const LabeledPointCloud& cloud);

struct LoadedCloud {
  LabeledPointCloud cloud;
  bool has_labels = false;  // coordinate-only external files leave labels empty
};

// Accepts our own labeled format (x,y[,z],instance,class) and bare
// coordinate files with or without a header line.
LoadedCloud load_cloud_csv(const std::string& path);

nlohmann::json gen_config_to_json(const gen::GenConfig& cfg);
gen::GenConfig gen_config_from_json(const nlohmann::json& j);
nlohmann::json aug_config_to_json(const gen::AugConfig& cfg);
gen::AugConfig aug_config_from_json(const nlohmann::json& j);

nlohmann::json points_to_json(const PointArray& pts);
PointArray points_from_json(const nlohmann::json& j, int dim);

// One dataset record; serialized as a single JSON line in manifest.jsonl.
struct ManifestEntry {
  std::string file;
  uint64_t seed = 0;
  gen::GenConfig gen_cfg;
  gen::AugConfig aug_cfg;
  PointArray junctions;  // unit-space coordinates, like the point files
  PointArray terminals;
  int n_instances = 0;

  ManifestEntry() : junctions(2), terminals(2) {}
};

void save_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> load_manifest(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace branchtopo::io
