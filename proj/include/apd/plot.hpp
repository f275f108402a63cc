#pragma once

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "apd/errors.hpp"

namespace apd {

struct PlotSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

// Minimal static SVG line plot, enough for the sweep figures.
inline void write_svg_plot(const std::string& path, const std::string& title,
                           const std::string& x_label, const std::string& y_label,
                           const std::vector<PlotSeries>& series) {
    if (series.empty()) throw input_error("write_svg_plot: no series");
    const int width = 640, height = 440, margin = 60;
    double xmin = 1e300, xmax = -1e300, ymin = 0.0, ymax = -1e300;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (xmax <= xmin) xmax = xmin + 1.0;
    ymax = std::max(ymax * 1.05, 1.0);
    auto px = [&](double x) {
        return margin + (x - xmin) / (xmax - xmin) * (width - 2 * margin);
    };
    auto py = [&](double y) {
        return height - margin - (y - ymin) / (ymax - ymin) * (height - 2 * margin);
    };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                   "#8c564b"};

    std::ostringstream svg;
    svg << std::fixed << std::setprecision(1);
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
        << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
    svg << "<text x='" << width / 2 << "' y='24' text-anchor='middle' font-size='16'>" << title
        << "</text>\n";
    svg << "<line x1='" << margin << "' y1='" << height - margin << "' x2='" << width - margin
        << "' y2='" << height - margin << "' stroke='black'/>\n";
    svg << "<line x1='" << margin << "' y1='" << margin << "' x2='" << margin << "' y2='"
        << height - margin << "' stroke='black'/>\n";
    svg << "<text x='" << width / 2 << "' y='" << height - 16
        << "' text-anchor='middle' font-size='12'>" << x_label << "</text>\n";
    svg << "<text x='16' y='" << height / 2 << "' text-anchor='middle' font-size='12' "
        << "transform='rotate(-90 16 " << height / 2 << ")'>" << y_label << "</text>\n";
    for (int tick = 0; tick <= 5; ++tick) {
        const double yv = ymin + (ymax - ymin) * tick / 5.0;
        svg << "<text x='" << margin - 6 << "' y='" << py(yv) + 4
            << "' text-anchor='end' font-size='10'>" << yv << "</text>\n";
        svg << "<line x1='" << margin << "' y1='" << py(yv) << "' x2='" << width - margin
            << "' y2='" << py(yv) << "' stroke='#dddddd'/>\n";
    }
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = colors[s % 6];
        svg << "<polyline fill='none' stroke='" << color << "' stroke-width='2' points='";
        for (std::size_t i = 0; i < series[s].x.size(); ++i)
            svg << px(series[s].x[i]) << "," << py(series[s].y[i]) << " ";
        svg << "'/>\n";
        for (std::size_t i = 0; i < series[s].x.size(); ++i)
            svg << "<circle cx='" << px(series[s].x[i]) << "' cy='" << py(series[s].y[i])
                << "' r='3' fill='" << color << "'/>\n";
        svg << "<text x='" << width - margin + 4 << "' y='" << margin + 16 * s
            << "' font-size='11' fill='" << color << "' text-anchor='start'>" << series[s].label
            << "</text>\n";
        for (std::size_t i = 0; i < series[s].x.size(); ++i) {
            const double xv = series[s].x[i];
            svg << "<text x='" << px(xv) << "' y='" << height - margin + 14
                << "' text-anchor='middle' font-size='10'>" << xv << "</text>\n";
        }
    }
    svg << "</svg>\n";
    std::ofstream f(path);
    if (!f) throw input_error("cannot write plot file: " + path);
    f << svg.str();
}

}  // namespace apd
