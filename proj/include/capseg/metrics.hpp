#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "capseg/error.hpp"
#include "capseg/grid.hpp"

namespace capseg {

struct Point2 {
    double y = 0.0;
    double x = 0.0;
    friend bool operator==(const Point2&, const Point2&) = default;
};

/// Dice similarity coefficient 2|g∩p| / (|g| + |p|). Two empty masks score 1.
inline double dice_coefficient(const Mask& g, const Mask& p) {
    require_same_shape(g, p, "dice_coefficient");
    require_binary(g, "dice_coefficient");
    require_binary(p, "dice_coefficient");
    std::size_t inter = 0, gs = 0, ps = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        gs += g[i];
        ps += p[i];
        inter += g[i] & p[i];
    }
    if (gs + ps == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(gs + ps);
}

/// Centres (in mm) of foreground pixels with a 4-neighbour that is background
/// or lies outside the grid.
inline std::vector<Point2> boundary_points(const Mask& mask, Spacing spacing = {}) {
    std::vector<Point2> pts;
    const auto rows = static_cast<long>(mask.rows());
    const auto cols = static_cast<long>(mask.cols());
    auto bg = [&](long r, long c) { return r < 0 || r >= rows || c < 0 || c >= cols || !mask(r, c); };
    for (long r = 0; r < rows; ++r) {
        for (long c = 0; c < cols; ++c) {
            if (!mask(r, c)) continue;
            if (bg(r - 1, c) || bg(r + 1, c) || bg(r, c - 1) || bg(r, c + 1)) {
                pts.push_back({static_cast<double>(r) * spacing.dy, static_cast<double>(c) * spacing.dx});
            }
        }
    }
    return pts;
}

namespace detail {

// For each point of `from`, distance to its nearest point in `to`.
inline void directed_distances(const std::vector<Point2>& from, const std::vector<Point2>& to,
                               std::vector<double>& out) {
    for (const auto& a : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& b : to) {
            const double dy = a.y - b.y, dx = a.x - b.x;
            best = std::min(best, dy * dy + dx * dx);
        }
        out.push_back(std::sqrt(best));
    }
}

inline std::vector<double> pooled_boundary_distances(const Mask& g, const Mask& p, Spacing spacing) {
    require_same_shape(g, p, "hausdorff");
    require_binary(g, "hausdorff");
    require_binary(p, "hausdorff");
    const auto bg = boundary_points(g, spacing);
    const auto bp = boundary_points(p, spacing);
    if (bg.empty() || bp.empty()) throw UndefinedMetric("Hausdorff distance undefined for an empty mask");
    std::vector<double> d;
    d.reserve(bg.size() + bp.size());
    directed_distances(bg, bp, d);
    directed_distances(bp, bg, d);
    return d;
}

}  // namespace detail

/// Percentile with linear interpolation between closest ranks (q in [0, 100]).
inline double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw InvalidInput("percentile of empty sample");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

/// Symmetric Hausdorff distance between the mask boundaries, in mm.
inline double hausdorff_distance(const Mask& g, const Mask& p, Spacing spacing = {}) {
    const auto d = detail::pooled_boundary_distances(g, p, spacing);
    return *std::max_element(d.begin(), d.end());
}

/// 95th percentile of the pooled directed boundary distances, in mm.
inline double hd95(const Mask& g, const Mask& p, Spacing spacing = {}) {
    return percentile(detail::pooled_boundary_distances(g, p, spacing), 95.0);
}

struct SliceMetrics {
    double dice = 0.0;
    std::optional<double> hd95;
};

struct CaseMetrics {
    std::string case_id;
    double mean_dice = 0.0;
    double mean_hd95 = 0.0;
    std::size_t slice_count = 0;
    std::size_t undefined_hd95_slices = 0;  ///< slices excluded from mean_hd95
};

inline SliceMetrics evaluate_slice(const Mask& prediction, const Mask& truth, Spacing spacing) {
    SliceMetrics m;
    m.dice = dice_coefficient(truth, prediction);
    try {
        m.hd95 = hd95(truth, prediction, spacing);
    } catch (const UndefinedMetric&) {
        m.hd95.reset();
    }
    return m;
}

/// Averages per-slice DSC and HD95 over one case. Slices with undefined HD95
/// are left out of the HD95 mean and counted; if none is defined the HD95
/// mean is NaN.
inline CaseMetrics evaluate_case(const std::vector<Mask>& predictions, const std::vector<Mask>& truths,
                                 Spacing spacing, std::string case_id) {
    if (predictions.empty() || predictions.size() != truths.size()) {
        throw InvalidInput("evaluate_case: need equal-length nonempty slice lists");
    }
    CaseMetrics cm;
    cm.case_id = std::move(case_id);
    cm.slice_count = predictions.size();
    double dice_sum = 0.0, hd_sum = 0.0;
    std::size_t hd_count = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const auto s = evaluate_slice(predictions[i], truths[i], spacing);
        dice_sum += s.dice;
        if (s.hd95) {
            hd_sum += *s.hd95;
            ++hd_count;
        }
    }
    cm.mean_dice = dice_sum / static_cast<double>(cm.slice_count);
    cm.undefined_hd95_slices = cm.slice_count - hd_count;
    cm.mean_hd95 = hd_count ? hd_sum / static_cast<double>(hd_count) : std::numeric_limits<double>::quiet_NaN();
    return cm;
}

}  // namespace capseg
