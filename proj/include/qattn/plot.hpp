#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "qattn/common.hpp"
#include "qattn/metrics.hpp"

namespace qattn::plot {

/// One curve: a mean line and an optional min/max band (band drawn when any
/// point has min != max).
struct PlotSeries {
    std::string label;
    std::vector<train::CurvePoint> points;
};

struct Panel {
    std::string title;
    std::string x_label = "steps";
    std::string y_label = "return";
    std::vector<PlotSeries> series;
};

namespace detail {

inline const char* palette(size_t i) {
    static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                   "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
    return colors[i % (sizeof(colors) / sizeof(colors[0]))];
}

inline std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

inline std::string fmt_tick(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

struct Domain {
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
};

inline Domain panel_domain(const Panel& p) {
    Domain d;
    bool first = true;
    for (const PlotSeries& s : p.series)
        for (const train::CurvePoint& pt : s.points) {
            const double x = static_cast<double>(pt.step);
            if (first) {
                d = {x, x, pt.min, pt.max};
                first = false;
            } else {
                d.x0 = std::min(d.x0, x);
                d.x1 = std::max(d.x1, x);
                d.y0 = std::min(d.y0, pt.min);
                d.y1 = std::max(d.y1, pt.max);
            }
        }
    if (d.x1 - d.x0 < 1e-9) {
        d.x0 -= 1;
        d.x1 += 1;
    }
    const double pad = (d.y1 - d.y0 < 1e-9) ? 1.0 : 0.05 * (d.y1 - d.y0);
    d.y0 -= pad;
    d.y1 += pad;
    return d;
}

}  // namespace detail

/// Emit side-by-side panels as a standalone SVG. Purely a function of its
/// inputs: fixed number formats, no timestamps. Each panel carries an SVG
/// comment with its data domain so tests (and curious readers) can check
/// axis alignment without rendering.
inline void write_svg(const std::string& path, const std::string& title,
                      const std::vector<Panel>& panels) {
    if (panels.empty()) throw InputError("plot: no panels given");
    const int pw = 440, ph = 320;          // panel box
    const int ml = 64, mr = 24, mt = 56, mb = 52;  // margins around each panel
    const int legend_h = 18;
    const int cell_w = ml + pw + mr;
    int max_series = 0;
    for (const Panel& p : panels)
        max_series = std::max(max_series, static_cast<int>(p.series.size()));
    const int cell_h = mt + ph + mb + legend_h * max_series;
    const int width = cell_w * static_cast<int>(panels.size());
    const int height = cell_h + 28;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    out << "<style>text{font-family:sans-serif;fill:#222}.axis{stroke:#222;stroke-width:1}"
           ".grid{stroke:#ddd;stroke-width:0.5}</style>\n";
    out << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">"
        << title << "</text>\n";

    for (size_t pi = 0; pi < panels.size(); ++pi) {
        const Panel& p = panels[pi];
        const detail::Domain d = detail::panel_domain(p);
        const int ox = static_cast<int>(pi) * cell_w + ml;
        const int oy = 28 + mt;
        auto sx = [&](double x) { return ox + (x - d.x0) / (d.x1 - d.x0) * pw; };
        auto sy = [&](double y) { return oy + ph - (y - d.y0) / (d.y1 - d.y0) * ph; };

        out << "<!-- panel \"" << p.title << "\" x-domain " << detail::fmt(d.x0) << " "
            << detail::fmt(d.x1) << " y-domain " << detail::fmt(d.y0) << " " << detail::fmt(d.y1)
            << " -->\n";
        out << "<text x=\"" << ox + pw / 2 << "\" y=\"" << oy - 16
            << "\" text-anchor=\"middle\" font-size=\"13\">" << p.title << "</text>\n";
        out << "<rect x=\"" << ox << "\" y=\"" << oy << "\" width=\"" << pw << "\" height=\"" << ph
            << "\" fill=\"none\" class=\"axis\"/>\n";

        for (int t = 0; t <= 4; ++t) {
            const double fx = d.x0 + (d.x1 - d.x0) * t / 4.0;
            const double fy = d.y0 + (d.y1 - d.y0) * t / 4.0;
            out << "<line x1=\"" << detail::fmt(sx(fx)) << "\" y1=\"" << oy << "\" x2=\""
                << detail::fmt(sx(fx)) << "\" y2=\"" << oy + ph << "\" class=\"grid\"/>\n";
            out << "<line x1=\"" << ox << "\" y1=\"" << detail::fmt(sy(fy)) << "\" x2=\""
                << ox + pw << "\" y2=\"" << detail::fmt(sy(fy)) << "\" class=\"grid\"/>\n";
            out << "<text x=\"" << detail::fmt(sx(fx)) << "\" y=\"" << oy + ph + 18
                << "\" text-anchor=\"middle\" font-size=\"11\">" << detail::fmt_tick(fx)
                << "</text>\n";
            out << "<text x=\"" << ox - 8 << "\" y=\"" << detail::fmt(sy(fy) + 4)
                << "\" text-anchor=\"end\" font-size=\"11\">" << detail::fmt_tick(fy)
                << "</text>\n";
        }
        out << "<text x=\"" << ox + pw / 2 << "\" y=\"" << oy + ph + 38
            << "\" text-anchor=\"middle\" font-size=\"12\">" << p.x_label << "</text>\n";
        out << "<text x=\"" << ox - 46 << "\" y=\"" << oy + ph / 2
            << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 " << ox - 46
            << " " << oy + ph / 2 << ")\">" << p.y_label << "</text>\n";

        for (size_t si = 0; si < p.series.size(); ++si) {
            const PlotSeries& s = p.series[si];
            if (s.points.empty()) continue;
            const char* color = detail::palette(si);
            bool has_band = false;
            for (const train::CurvePoint& pt : s.points)
                if (pt.min != pt.max) has_band = true;
            if (has_band) {
                out << "<polygon fill=\"" << color << "\" opacity=\"0.18\" points=\"";
                for (const train::CurvePoint& pt : s.points)
                    out << detail::fmt(sx(static_cast<double>(pt.step))) << ","
                        << detail::fmt(sy(pt.max)) << " ";
                for (auto it = s.points.rbegin(); it != s.points.rend(); ++it)
                    out << detail::fmt(sx(static_cast<double>(it->step))) << ","
                        << detail::fmt(sy(it->min)) << " ";
                out << "\"/>\n";
            }
            out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" "
                << "points=\"";
            for (const train::CurvePoint& pt : s.points)
                out << detail::fmt(sx(static_cast<double>(pt.step))) << ","
                    << detail::fmt(sy(pt.mean)) << " ";
            out << "\"/>\n";
            const int ly = oy + ph + 52 + static_cast<int>(si) * legend_h;
            out << "<line x1=\"" << ox << "\" y1=\"" << ly - 4 << "\" x2=\"" << ox + 22
                << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
            out << "<text x=\"" << ox + 28 << "\" y=\"" << ly << "\" font-size=\"11\">" << s.label
                << "</text>\n";
        }
    }
    out << "</svg>\n";
    if (!out) throw InputError("failed writing '" + path + "'");
}

}  // namespace qattn::plot
