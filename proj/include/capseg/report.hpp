#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "capseg/dataset_io.hpp"
#include "capseg/io/png.hpp"
#include "capseg/trainer.hpp"

namespace capseg {

namespace fs = std::filesystem;

/// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    for (int prec = 15; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

inline void write_loss_log(const fs::path& path, const std::vector<EpochLog>& logs) {
    auto out = open_out(path);
    out << "epoch,mean_loss,wall_seconds\n";
    for (const auto& l : logs) out << l.epoch << ',' << fmt_double(l.mean_loss) << ',' << fmt_double(l.wall_seconds) << '\n';
}

inline void write_batch_log(const fs::path& path, const std::vector<BatchRecord>& batches) {
    auto out = open_out(path);
    out << "epoch,batch,index_hash,loss\n";
    for (const auto& b : batches) out << b.epoch << ',' << b.batch << ',' << hex64(b.hash) << ',' << fmt_double(b.loss) << '\n';
}

/// Per-case rows followed by a Mean row (mean over cases).
inline void write_metrics_csv(const fs::path& path, const EvaluationReport& r) {
    auto out = open_out(path);
    out << "case_id,mean_dice,mean_hd95,slice_count\n";
    std::size_t slices = 0;
    for (const auto& c : r.cases) {
        out << c.case_id << ',' << fmt_double(c.mean_dice) << ',' << fmt_double(c.mean_hd95) << ',' << c.slice_count
            << '\n';
        slices += c.slice_count;
    }
    out << "Mean," << fmt_double(r.mean_dice) << ',' << fmt_double(r.mean_hd95) << ',' << slices << '\n';
}

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Flattens a JSON object to dotted key=value pairs.
inline void flatten_json(const nlohmann::json& j, const std::string& prefix, KeyValues& out) {
    if (j.is_object()) {
        for (const auto& [k, v] : j.items()) flatten_json(v, prefix.empty() ? k : prefix + "." + k, out);
    } else if (j.is_number_float()) {
        out.emplace_back(prefix, fmt_double(j.get<double>()));
    } else if (j.is_string()) {
        out.emplace_back(prefix, j.get<std::string>());
    } else {
        out.emplace_back(prefix, j.dump());
    }
}

inline void write_config_echo(const fs::path& path, const KeyValues& kv) {
    auto out = open_out(path);
    for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
}

inline KeyValues read_config_echo(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot read " + path.string());
    KeyValues kv;
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return kv;
}

using Rgb = std::array<std::uint8_t, 3>;

/// Gray image with the ground-truth contour in green and the prediction contour in red
/// (yellow where they coincide).
inline io::RgbImage overlay(const RealGrid& image, const Mask& truth, const Mask& prediction) {
    require_same_shape(image, truth, "overlay");
    require_same_shape(truth, prediction, "overlay");
    io::RgbImage img(image.rows(), image.cols());
    const auto gray = io::to_u8(image);
    for (std::size_t r = 0; r < img.rows; ++r)
        for (std::size_t c = 0; c < img.cols; ++c) img.set(r, c, {gray(r, c), gray(r, c), gray(r, c)});
    Mask gt_edge(truth.rows(), truth.cols()), pr_edge(truth.rows(), truth.cols());
    for (const auto& p : boundary_points(truth)) gt_edge(static_cast<std::size_t>(p.y), static_cast<std::size_t>(p.x)) = 1;
    for (const auto& p : boundary_points(prediction))
        pr_edge(static_cast<std::size_t>(p.y), static_cast<std::size_t>(p.x)) = 1;
    for (std::size_t r = 0; r < img.rows; ++r) {
        for (std::size_t c = 0; c < img.cols; ++c) {
            if (gt_edge(r, c) && pr_edge(r, c)) img.set(r, c, {255, 255, 0});
            else if (gt_edge(r, c)) img.set(r, c, {0, 220, 0});
            else if (pr_edge(r, c)) img.set(r, c, {230, 0, 0});
        }
    }
    return img;
}

inline void draw_line(io::RgbImage& img, long r0, long c0, long r1, long c1, Rgb color, int thickness = 1) {
    const long dr = std::abs(r1 - r0), dc = std::abs(c1 - c0);
    const long sr = r0 < r1 ? 1 : -1, sc = c0 < c1 ? 1 : -1;
    long err = dc - dr;
    for (;;) {
        for (int a = -(thickness / 2); a <= thickness / 2; ++a)
            for (int b = -(thickness / 2); b <= thickness / 2; ++b)
                if (r0 + a >= 0 && c0 + b >= 0)
                    img.set(static_cast<std::size_t>(r0 + a), static_cast<std::size_t>(c0 + b), color);
        if (r0 == r1 && c0 == c1) break;
        const long e2 = 2 * err;
        if (e2 > -dr) {
            err -= dr;
            c0 += sc;
        }
        if (e2 < dc) {
            err += dc;
            r0 += sr;
        }
    }
}

inline const std::vector<Rgb>& series_palette() {
    static const std::vector<Rgb> p{{214, 39, 40}, {31, 119, 180}, {44, 160, 44}, {148, 103, 189}, {255, 127, 14}};
    return p;
}

/// Line plot of one curve per series on a shared linear y axis starting at 0.
/// There is no text rendering; series colours follow series_palette() in
/// argument order and are also shown as swatches in the top-right corner.
inline io::RgbImage plot_curves(const std::vector<std::pair<std::string, std::vector<double>>>& series,
                                std::size_t height = 360, std::size_t width = 540) {
    io::RgbImage img(height, width);
    std::fill(img.data.begin(), img.data.end(), std::uint8_t{255});
    const long left = 40, right = static_cast<long>(width) - 20, top = 20, bottom = static_cast<long>(height) - 30;
    std::size_t n = 0;
    double ymax = 0.0;
    for (const auto& [name, ys] : series) {
        n = std::max(n, ys.size());
        for (double y : ys)
            if (std::isfinite(y)) ymax = std::max(ymax, y);
    }
    if (ymax <= 0) ymax = 1.0;
    const Rgb axis{0, 0, 0}, grid{225, 225, 225};
    for (int t = 1; t <= 4; ++t) {
        const long r = bottom - (bottom - top) * t / 4;
        draw_line(img, r, left, r, right, grid);
    }
    draw_line(img, bottom, left, bottom, right, axis);
    draw_line(img, top, left, bottom, left, axis);
    auto xpos = [&](std::size_t i) {
        return n <= 1 ? left : left + static_cast<long>(std::lround(double(i) * double(right - left) / double(n - 1)));
    };
    auto ypos = [&](double y) { return bottom - static_cast<long>(std::lround(y / ymax * double(bottom - top))); };
    for (std::size_t i = 0; i < n; ++i) draw_line(img, bottom, xpos(i), bottom + 4, xpos(i), axis);
    const auto& pal = series_palette();
    for (std::size_t s = 0; s < series.size(); ++s) {
        const Rgb col = pal[s % pal.size()];
        const auto& ys = series[s].second;
        for (std::size_t i = 0; i + 1 < ys.size(); ++i)
            if (std::isfinite(ys[i]) && std::isfinite(ys[i + 1]))
                draw_line(img, ypos(ys[i]), xpos(i), ypos(ys[i + 1]), xpos(i + 1), col, 2);
        for (std::size_t i = 0; i < ys.size(); ++i)
            if (std::isfinite(ys[i]))
                for (int a = -2; a <= 2; ++a) draw_line(img, ypos(ys[i]) + a, xpos(i) - 2, ypos(ys[i]) + a, xpos(i) + 2, col);
        const long sr = top + 4 + static_cast<long>(s) * 12;
        for (long a = 0; a < 8; ++a) draw_line(img, sr + a, right - 30, sr + a, right - 10, col);
    }
    return img;
}

/// epoch column followed by one mean-loss column per run.
inline void write_loss_table(const fs::path& path,
                             const std::vector<std::pair<std::string, std::vector<EpochLog>>>& runs) {
    auto out = open_out(path);
    out << "epoch";
    std::size_t n = 0;
    for (const auto& [name, logs] : runs) {
        out << ',' << name;
        n = std::max(n, logs.size());
    }
    out << '\n';
    for (std::size_t e = 0; e < n; ++e) {
        out << e + 1;
        for (const auto& [name, logs] : runs) out << ',' << (e < logs.size() ? fmt_double(logs[e].mean_loss) : "");
        out << '\n';
    }
}

/// Per-case DSC and HD95 per run side by side, then a Mean row.
inline void write_metrics_table(const fs::path& path,
                                const std::vector<std::pair<std::string, EvaluationReport>>& runs) {
    auto out = open_out(path);
    out << "case_id";
    for (const auto& [name, r] : runs) out << ',' << name << "_dice," << name << "_hd95";
    out << '\n';
    std::map<std::string, std::vector<const CaseMetrics*>> rows;
    for (std::size_t k = 0; k < runs.size(); ++k)
        for (const auto& c : runs[k].second.cases) {
            auto& row = rows[c.case_id];
            row.resize(runs.size(), nullptr);
            row[k] = &c;
        }
    for (const auto& [id, row] : rows) {
        out << id;
        for (const auto* c : row) {
            if (c) out << ',' << fmt_double(c->mean_dice) << ',' << fmt_double(c->mean_hd95);
            else out << ",,";
        }
        out << '\n';
    }
    out << "Mean";
    for (const auto& [name, r] : runs) out << ',' << fmt_double(r.mean_dice) << ',' << fmt_double(r.mean_hd95);
    out << '\n';
}

}  // namespace capseg
