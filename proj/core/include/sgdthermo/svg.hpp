#pragma once

#include <string>
#include <vector>

namespace sgdthermo {

// Just enough SVG plotting for the convenience figures; every quantitative
// artifact is CSV/JSON.
struct SvgSeries {
  std::string label;
  std::string color = "#1f77b4";
  bool line = false;        // polyline instead of markers
  std::vector<double> x, y;
};

struct SvgPlotSpec {
  std::string title;
  std::string x_label, y_label;
  bool log_x = false, log_y = false;
  int width = 640, height = 480;
  std::vector<SvgSeries> series;
  bool diagonal = false;  // y = x guide line
};

void write_svg_plot(const std::string& path, const SvgPlotSpec& spec);

}  // namespace sgdthermo
