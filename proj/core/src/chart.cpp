#include "iomm/chart.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "iomm/binio.hpp"
#include "iomm/errors.hpp"

namespace iomm {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

}  // namespace

void emit_chart(const std::vector<ChartSeries>& series, const std::string& path,
                const std::string& x_label, const std::string& y_label) {
    if (series.empty()) throw ConfigError("emit_chart: no series");
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series) {
        if (s.x.empty()) throw ConfigError("emit_chart: empty series '" + s.label + "'");
        if (s.x.size() != s.y.size())
            throw ShapeError("emit_chart: x/y length mismatch in series '" + s.label + "'");
        for (const double v : s.x) { xmin = std::min(xmin, v); xmax = std::max(xmax, v); }
        for (const double v : s.y) { ymin = std::min(ymin, v); ymax = std::max(ymax, v); }
    }
    if (xmax == xmin) { xmax = xmin + 1.0; }
    if (ymax == ymin) { ymax = ymin + 1.0; }

    const double width = 800, height = 500;
    const double ml = 70, mr = 20, mt = 20, mb = 50;
    const double pw = width - ml - mr, ph = height - mt - mb;
    auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
    auto sy = [&](double y) { return mt + ph - (y - ymin) / (ymax - ymin) * ph; };

    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\""
        << width << "\" height=\"" << height << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw
        << "\" y2=\"" << mt + ph << "\" stroke=\"black\"/>\n"
        << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
        << mt + ph << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 10
        << "\" text-anchor=\"middle\" font-size=\"14\">" << x_label << "</text>\n";
    svg << "<text x=\"18\" y=\"" << mt + ph / 2
        << "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 18 "
        << mt + ph / 2 << ")\">" << y_label << "</text>\n";
    svg << "<text x=\"" << ml << "\" y=\"" << height - 30
        << "\" text-anchor=\"middle\" font-size=\"11\">" << fmt(xmin) << "</text>\n";
    svg << "<text x=\"" << ml + pw << "\" y=\"" << height - 30
        << "\" text-anchor=\"middle\" font-size=\"11\">" << fmt(xmax) << "</text>\n";
    svg << "<text x=\"" << ml - 6 << "\" y=\"" << mt + ph
        << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(ymin) << "</text>\n";
    svg << "<text x=\"" << ml - 6 << "\" y=\"" << mt + 10
        << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(ymax) << "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const char* color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
        svg << "<polyline fill=\"none\" stroke=\"" << color
            << "\" stroke-width=\"1.5\" points=\"";
        for (size_t i = 0; i < s.x.size(); ++i) {
            if (i) svg << " ";
            svg << fmt(sx(s.x[i])) << "," << fmt(sy(s.y[i]));
        }
        svg << "\"/>\n";
        const double ly = mt + 16 + 18 * double(si);
        svg << "<line x1=\"" << ml + pw - 150 << "\" y1=\"" << ly << "\" x2=\""
            << ml + pw - 120 << "\" y2=\"" << ly << "\" stroke=\"" << color
            << "\" stroke-width=\"2\"/>\n";
        svg << "<text x=\"" << ml + pw - 114 << "\" y=\"" << ly + 4
            << "\" font-size=\"12\">" << s.label << "</text>\n";
    }
    svg << "</svg>\n";
    write_file_bytes(path, svg.str());
}

}  // namespace iomm
