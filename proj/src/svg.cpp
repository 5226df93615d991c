#include "branchtopo/svg.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "branchtopo/io.hpp"

namespace branchtopo::svg {
namespace {

constexpr std::array<const char*, 20> kPalette = {
    "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231",
    "#911eb4", "#46f0f0", "#f032e6", "#bcf60c", "#fabebe",
    "#008080", "#e6beff", "#9a6324", "#fffac8", "#800000",
    "#aaffc3", "#808000", "#ffd8b1", "#000075", "#808080"};

void project_axes(const std::string& project, int dim, int& ax, int& ay) {
  if (dim == 2) {
    ax = 0;
    ay = 1;
    return;
  }
  if (project == "xy") {
    ax = 0;
    ay = 1;
  } else if (project == "xz") {
    ax = 0;
    ay = 2;
  } else if (project == "yz") {
    ax = 1;
    ay = 2;
  } else {
    throw DataError("unknown projection '" + project + "'");
  }
}

std::string fmt(double v) {
  // Two decimals are plenty at canvas resolution and keep files small.
  const double r = std::round(v * 100.0) / 100.0;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", r);
  return buf;
}

}  // namespace

std::string instance_color(int instance) {
  if (instance < 0) throw DataError("padding has no color");
  return kPalette[instance % static_cast<int>(kPalette.size())];
}

std::string render_plot(const LabeledPointCloud& cloud, const PointArray& junctions,
                        const PlotOptions& opts) {
  int ax = 0, ay = 1;
  project_axes(opts.project, cloud.coords.dim, ax, ay);

  std::vector<int> keep;
  for (int i = 0; i < cloud.coords.size(); ++i) {
    if (cloud.cls[i] != PointClass::kPadding && cloud.instance[i] >= 0) keep.push_back(i);
  }
  if (keep.empty()) throw DataError("empty prediction");

  double lo[2] = {1e300, 1e300}, hi[2] = {-1e300, -1e300};
  auto grow = [&](double x, double y) {
    lo[0] = std::min(lo[0], x);
    lo[1] = std::min(lo[1], y);
    hi[0] = std::max(hi[0], x);
    hi[1] = std::max(hi[1], y);
  };
  for (int i : keep) grow(cloud.coords.at(i, ax), cloud.coords.at(i, ay));
  for (int j = 0; j < junctions.size(); ++j) grow(junctions.at(j, ax), junctions.at(j, ay));

  const double span = std::max({hi[0] - lo[0], hi[1] - lo[1], 1e-12});
  const double margin = 0.05 * opts.size_px;
  const double scale = (opts.size_px - 2.0 * margin) / span;
  auto sx = [&](double x) { return margin + (x - lo[0]) * scale; };
  auto sy = [&](double y) { return opts.size_px - margin - (y - lo[1]) * scale; };

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(opts.size_px) +
         "\" height=\"" + std::to_string(opts.size_px) + "\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";

  for (int i : keep) {
    out += "<circle cx=\"" + fmt(sx(cloud.coords.at(i, ax))) + "\" cy=\"" +
           fmt(sy(cloud.coords.at(i, ay))) + "\" r=\"" + fmt(opts.point_radius) + "\" fill=\"" +
           instance_color(cloud.instance[i]) + "\"/>\n";
  }

  const double arm = 3.0 * opts.point_radius;
  for (int j = 0; j < junctions.size(); ++j) {
    const double cx = sx(junctions.at(j, ax));
    const double cy = sy(junctions.at(j, ay));
    out += "<path class=\"cross\" d=\"M " + fmt(cx - arm) + " " + fmt(cy - arm) + " L " +
           fmt(cx + arm) + " " + fmt(cy + arm) + " M " + fmt(cx - arm) + " " + fmt(cy + arm) +
           " L " + fmt(cx + arm) + " " + fmt(cy - arm) +
           "\" stroke=\"#000000\" stroke-width=\"2\" fill=\"none\"/>\n";
  }

  out += "</svg>\n";
  return out;
}

void save_plot(const std::string& path, const LabeledPointCloud& cloud,
               const PointArray& junctions, const PlotOptions& opts) {
  io::write_text_file(path, render_plot(cloud, junctions, opts));
}

}  // namespace branchtopo::svg
