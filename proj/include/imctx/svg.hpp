#pragma once

// Minimal deterministic SVG line charts from CSV tables.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "imctx/common.hpp"

namespace imctx {

/// String cells of a CSV with a header row; '#' and blank lines are skipped.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line_numbers;

    std::optional<std::size_t> column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        return std::nullopt;
    }
};

inline Table parse_table(std::string_view text) {
    Table t;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty() || line.front() == '#') continue;
        std::vector<std::string> cells;
        std::size_t s = 0;
        while (true) {
            auto c = line.find(',', s);
            cells.emplace_back(line.substr(s, c == std::string_view::npos ? std::string_view::npos : c - s));
            if (c == std::string_view::npos) break;
            s = c + 1;
        }
        if (t.header.empty()) {
            t.header = std::move(cells);
            continue;
        }
        if (cells.size() != t.header.size())
            throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(t.header.size()) +
                            " cells, found " + std::to_string(cells.size()));
        t.rows.push_back(std::move(cells));
        t.line_numbers.push_back(line_no);
    }
    if (t.header.empty()) throw DataError("table has no header row");
    return t;
}

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

/// Series from a table. Without `group`, every column other than `x` is a
/// series. With `group`, rows are split by that column's value and `y`
/// supplies the values. Empty cells are skipped.
inline std::vector<Series> table_series(const Table& t, const std::string& x, const std::string& y = {},
                                        const std::string& group = {}) {
    if (t.rows.empty()) throw DataError("table has no data rows");
    const std::string xname = x.empty() ? t.header.front() : x;
    auto xc = t.column(xname);
    if (!xc) throw UsageError("no column named " + xname);
    auto num = [&](std::size_t r, std::size_t c, std::optional<double>& out) {
        out.reset();
        if (t.rows[r][c].empty()) return;
        bool ok = false;
        double v = parse_double(t.rows[r][c], ok);
        if (!ok || !std::isfinite(v))
            throw DataError("line " + std::to_string(t.line_numbers[r]) + ": column " + t.header[c] +
                            " is not a finite number: '" + t.rows[r][c] + "'");
        out = v;
    };
    std::vector<Series> out;
    std::optional<double> xv, yv;
    if (!group.empty()) {
        auto gc = t.column(group);
        if (!gc) throw UsageError("no column named " + group);
        const std::string yname = y.empty() ? t.header.back() : y;
        auto yc = t.column(yname);
        if (!yc) throw UsageError("no column named " + yname);
        std::vector<std::string> order;
        std::map<std::string, std::size_t> index;
        for (std::size_t r = 0; r < t.rows.size(); ++r) {
            const auto& g = t.rows[r][*gc];
            if (!index.count(g)) {
                index[g] = out.size();
                out.push_back({g, {}});
            }
            num(r, *xc, xv);
            num(r, *yc, yv);
            if (xv && yv) out[index[g]].points.emplace_back(*xv, *yv);
        }
        return out;
    }
    for (std::size_t c = 0; c < t.header.size(); ++c) {
        if (c == *xc) continue;
        if (!y.empty() && t.header[c] != y) continue;
        Series s{t.header[c], {}};
        for (std::size_t r = 0; r < t.rows.size(); ++r) {
            num(r, *xc, xv);
            num(r, c, yv);
            if (xv && yv) s.points.emplace_back(*xv, *yv);
        }
        out.push_back(std::move(s));
    }
    if (out.empty()) throw DataError("table has no series columns");
    return out;
}

namespace detail {
inline std::string svg_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}
inline std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}
inline std::string xml_escape(const std::string& s) {
    std::string o;
    for (char c : s) {
        switch (c) {
            case '&': o += "&amp;"; break;
            case '<': o += "&lt;"; break;
            case '>': o += "&gt;"; break;
            case '"': o += "&quot;"; break;
            default: o += c;
        }
    }
    return o;
}
}  // namespace detail

/// Fixed 720×440 viewport, linear axes, one polyline per series, legend in
/// the top-right corner.
inline std::string render_svg(const std::vector<Series>& series, const std::string& title,
                              const std::string& x_label, const std::string& y_label) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    const double W = 720, H = 440, L = 70, R = 160, T = 40, B = 50;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    std::size_t npts = 0;
    for (const auto& s : series)
        for (auto [x, y] : s.points) {
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
            ++npts;
        }
    if (npts == 0) throw DataError("nothing to plot: no numeric points");
    if (x1 == x0) {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if (y1 == y0) {
        y0 -= 0.5;
        y1 += 0.5;
    }
    const double pw = W - L - R, ph = H - T - B;
    auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return T + ph - (y - y0) / (y1 - y0) * ph; };
    using detail::svg_num;
    std::string o;
    o += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    o += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"720\" height=\"440\" viewBox=\"0 0 720 "
         "440\">\n";
    o += "<rect x=\"0\" y=\"0\" width=\"720\" height=\"440\" fill=\"white\"/>\n";
    o += "<text x=\"" + svg_num(W / 2) + "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" +
         detail::xml_escape(title) + "</text>\n";
    o += "<rect x=\"" + svg_num(L) + "\" y=\"" + svg_num(T) + "\" width=\"" + svg_num(pw) + "\" height=\"" + svg_num(ph) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
        o += "<line x1=\"" + svg_num(px(fx)) + "\" y1=\"" + svg_num(T + ph) + "\" x2=\"" + svg_num(px(fx)) + "\" y2=\"" +
             svg_num(T + ph + 5) + "\" stroke=\"black\"/>\n";
        o += "<text x=\"" + svg_num(px(fx)) + "\" y=\"" + svg_num(T + ph + 18) +
             "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + detail::tick_label(fx) +
             "</text>\n";
        o += "<line x1=\"" + svg_num(L - 5) + "\" y1=\"" + svg_num(py(fy)) + "\" x2=\"" + svg_num(L) + "\" y2=\"" +
             svg_num(py(fy)) + "\" stroke=\"black\"/>\n";
        o += "<text x=\"" + svg_num(L - 8) + "\" y=\"" + svg_num(py(fy) + 4) +
             "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + detail::tick_label(fy) +
             "</text>\n";
    }
    o += "<text x=\"" + svg_num(L + pw / 2) + "\" y=\"" + svg_num(H - 10) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + detail::xml_escape(x_label) +
         "</text>\n";
    o += "<text x=\"16\" y=\"" + svg_num(T + ph / 2) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"12\" transform=\"rotate(-90 16 " + svg_num(T + ph / 2) + ")\">" + detail::xml_escape(y_label) +
         "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = palette[i % (sizeof(palette) / sizeof(palette[0]))];
        std::string pts;
        for (auto [x, y] : series[i].points) {
            if (!pts.empty()) pts += ' ';
            pts += svg_num(px(x)) + "," + svg_num(py(y));
        }
        o += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" + pts +
             "\"/>\n";
        const double ly = T + 10 + 18.0 * static_cast<double>(i);
        o += "<line x1=\"" + svg_num(W - R + 15) + "\" y1=\"" + svg_num(ly) + "\" x2=\"" + svg_num(W - R + 40) +
             "\" y2=\"" + svg_num(ly) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
        o += "<text x=\"" + svg_num(W - R + 46) + "\" y=\"" + svg_num(ly + 4) +
             "\" font-family=\"sans-serif\" font-size=\"12\">" + detail::xml_escape(series[i].name) + "</text>\n";
    }
    o += "</svg>\n";
    return o;
}

}  // namespace imctx
