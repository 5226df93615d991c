#pragma once

#include <string>

#include "branchtopo/common.hpp"

namespace branchtopo::svg {

// Fixed 20-entry hue table; ids wrap around.
std::string instance_color(int instance);

struct PlotOptions {
  int size_px = 640;
  double point_radius = 2.5;
  std::string project = "xy";  // axis pair kept when plotting 3D clouds
};

// Scatter plot of the non-padding points colored by instance, with one cross
// glyph per junction center. Byte-deterministic for identical inputs.
std::string render_plot(const LabeledPointCloud& cloud, const PointArray& junctions,
                        const PlotOptions& opts);

void save_plot(const std::string& path, const LabeledPointCloud& cloud,
               const PointArray& junctions, const PlotOptions& opts);

}  // namespace branchtopo::svg
