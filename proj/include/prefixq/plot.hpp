#pragma once

// Static SVG line charts for loss and robustness curves.

#include <string>
#include <vector>

namespace prefixq::plot {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  bool log_y = false;
};

std::string render_svg(const Chart& chart);
void write_svg(const Chart& chart, const std::string& path);

}  // namespace prefixq::plot
