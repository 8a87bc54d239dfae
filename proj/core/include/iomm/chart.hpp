#pragma once

#include <string>
#include <vector>

// Minimal SVG 1.1 line charts: one polyline per series, axis labels, legend.

namespace iomm {

struct ChartSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

void emit_chart(const std::vector<ChartSeries>& series, const std::string& path,
                const std::string& x_label = "x", const std::string& y_label = "y");

}  // namespace iomm
