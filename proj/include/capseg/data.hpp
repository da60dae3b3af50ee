#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "capseg/error.hpp"
#include "capseg/grid.hpp"

namespace capseg {

/// One image with its expert (y_true) and non-expert (y_std) annotations.
struct SegSample {
    std::string case_id;
    int slice_index = 0;
    RealGrid image;
    Mask expert_mask;
    Mask nonexpert_mask;
    Spacing spacing;

    void validate() const {
        require_same_shape(image, expert_mask, "SegSample");
        require_same_shape(image, nonexpert_mask, "SegSample");
        require_binary(expert_mask, "SegSample expert mask");
        require_binary(nonexpert_mask, "SegSample non-expert mask");
        for (double v : image)
            if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput("SegSample: image outside [0,1]");
    }
};

struct AugmentConfig {
    double max_rotation_degrees = 15.0;
    bool horizontal_flip = true;
    std::pair<double, double> intensity_scale_range{0.9, 1.1};
    std::pair<double, double> intensity_shift_range{-0.1, 0.1};
    std::uint64_t seed = 0;

    static AugmentConfig identity() {
        AugmentConfig c;
        c.max_rotation_degrees = 0.0;
        c.horizontal_flip = false;
        c.intensity_scale_range = {1.0, 1.0};
        c.intensity_shift_range = {0.0, 0.0};
        return c;
    }

    void validate() const {
        if (!(max_rotation_degrees >= 0)) throw ConfigError("rotation range must be >= 0");
        if (!(intensity_scale_range.first <= intensity_scale_range.second) ||
            !(intensity_shift_range.first <= intensity_shift_range.second))
            throw ConfigError("augmentation ranges must be ordered");
    }
};

/// Concrete augmentation parameters drawn for one sample.
struct AugmentDraw {
    double angle_degrees = 0.0;
    bool flip = false;
    double intensity_scale = 1.0;
    double intensity_shift = 0.0;
};

/// Independent stream for (seed, a, b), e.g. (seed, epoch, sample index).
inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
    return std::mt19937_64(seq);
}

// Uniform draw in [lo, hi] that tolerates lo == hi.
inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

/// Min-max rescale to [0,1]; a constant image maps to zeros.
inline RealGrid normalize(const RealGrid& raw) {
    require_finite(raw, "normalize");
    RealGrid out(raw.rows(), raw.cols(), 0.0);
    if (raw.empty()) return out;
    const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
    const double range = *hi - *lo;
    if (range == 0.0) return out;
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - *lo) / range;
    return out;
}

/// Bilinear resize with half-pixel centres and edge clamping.
inline RealGrid resize_bilinear(const RealGrid& in, std::size_t rows, std::size_t cols) {
    if (in.rows() == rows && in.cols() == cols) return in;
    RealGrid out(rows, cols);
    const double sy = static_cast<double>(in.rows()) / static_cast<double>(rows);
    const double sx = static_cast<double>(in.cols()) / static_cast<double>(cols);
    const auto maxr = static_cast<double>(in.rows() - 1), maxc = static_cast<double>(in.cols() - 1);
    for (std::size_t r = 0; r < rows; ++r) {
        const double fy = std::clamp((static_cast<double>(r) + 0.5) * sy - 0.5, 0.0, maxr);
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, in.rows() - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t c = 0; c < cols; ++c) {
            const double fx = std::clamp((static_cast<double>(c) + 0.5) * sx - 0.5, 0.0, maxc);
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, in.cols() - 1);
            const double wx = fx - static_cast<double>(x0);
            out(r, c) = (1 - wy) * ((1 - wx) * in(y0, x0) + wx * in(y0, x1)) + wy * ((1 - wx) * in(y1, x0) + wx * in(y1, x1));
        }
    }
    return out;
}

template <typename T>
Grid<T> resize_nearest(const Grid<T>& in, std::size_t rows, std::size_t cols) {
    if (in.rows() == rows && in.cols() == cols) return in;
    Grid<T> out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t sr = std::min(in.rows() - 1, r * in.rows() / rows);
        for (std::size_t c = 0; c < cols; ++c) out(r, c) = in(sr, std::min(in.cols() - 1, c * in.cols() / cols));
    }
    return out;
}

/// Resizes to target x target: bilinear image, nearest-neighbour masks, spacing
/// rescaled so that extent in millimetres is preserved.
inline SegSample resize(const SegSample& s, int target) {
    if (target <= 0) throw InvalidInput("resize: target must be positive");
    const auto t = static_cast<std::size_t>(target);
    SegSample out = s;
    if (s.image.rows() == t && s.image.cols() == t) return out;
    out.image = resize_bilinear(s.image, t, t);
    for (auto& v : out.image) v = std::clamp(v, 0.0, 1.0);
    out.expert_mask = resize_nearest(s.expert_mask, t, t);
    out.nonexpert_mask = resize_nearest(s.nonexpert_mask, t, t);
    out.spacing.dy = s.spacing.dy * static_cast<double>(s.image.rows()) / static_cast<double>(t);
    out.spacing.dx = s.spacing.dx * static_cast<double>(s.image.cols()) / static_cast<double>(t);
    return out;
}

inline AugmentDraw draw_augmentation(const AugmentConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    AugmentDraw d;
    d.angle_degrees = uniform(rng, -cfg.max_rotation_degrees, cfg.max_rotation_degrees);
    const bool coin = (rng() >> 63) != 0;
    d.flip = cfg.horizontal_flip && coin;
    d.intensity_scale = uniform(rng, cfg.intensity_scale_range.first, cfg.intensity_scale_range.second);
    d.intensity_shift = uniform(rng, cfg.intensity_shift_range.first, cfg.intensity_shift_range.second);
    return d;
}

namespace detail {

// Rotation about the grid centre followed by an optional horizontal flip.
// `sample(grid, y, x)` reads the source at fractional coordinates.
template <typename T, typename Sampler>
Grid<T> warp(const Grid<T>& in, const AugmentDraw& d, Sampler sample) {
    Grid<T> out(in.rows(), in.cols());
    const double cy = (static_cast<double>(in.rows()) - 1.0) / 2.0;
    const double cx = (static_cast<double>(in.cols()) - 1.0) / 2.0;
    const double a = d.angle_degrees * std::numbers::pi / 180.0;
    const double ca = std::cos(a), sa = std::sin(a);
    for (std::size_t r = 0; r < in.rows(); ++r) {
        for (std::size_t c = 0; c < in.cols(); ++c) {
            const std::size_t src_c = d.flip ? in.cols() - 1 - c : c;
            if (d.angle_degrees == 0.0) {
                out(r, c) = in(r, src_c);
                continue;
            }
            const double y = static_cast<double>(r) - cy, x = static_cast<double>(src_c) - cx;
            out(r, c) = sample(in, ca * y - sa * x + cy, sa * y + ca * x + cx);
        }
    }
    return out;
}

}  // namespace detail

/// Applies the geometric part of a draw to a mask (nearest neighbour, zero fill).
inline Mask warp_mask(const Mask& m, const AugmentDraw& d) {
    return detail::warp(m, d, [](const Mask& g, double y, double x) -> std::uint8_t {
        const long r = std::lround(y), c = std::lround(x);
        if (r < 0 || c < 0 || r >= static_cast<long>(g.rows()) || c >= static_cast<long>(g.cols())) return 0;
        return g(r, c);
    });
}

/// Applies the geometric part of a draw to an image (bilinear, zero fill).
inline RealGrid warp_image(const RealGrid& img, const AugmentDraw& d) {
    return detail::warp(img, d, [](const RealGrid& g, double y, double x) {
        const double y0 = std::floor(y), x0 = std::floor(x);
        const double wy = y - y0, wx = x - x0;
        auto at = [&](double yy, double xx) {
            if (yy < 0 || xx < 0 || yy >= static_cast<double>(g.rows()) || xx >= static_cast<double>(g.cols())) return 0.0;
            return g(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
        };
        return (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1)) +
               wy * ((1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1));
    });
}

inline SegSample apply_augmentation(const SegSample& s, const AugmentDraw& d) {
    SegSample out = s;
    out.image = warp_image(s.image, d);
    out.expert_mask = warp_mask(s.expert_mask, d);
    out.nonexpert_mask = warp_mask(s.nonexpert_mask, d);
    if (d.intensity_scale != 1.0 || d.intensity_shift != 0.0) {
        for (auto& v : out.image) v = std::clamp(v * d.intensity_scale + d.intensity_shift, 0.0, 1.0);
    }
    return out;
}

/// Random rotation, flip and intensity change. The same spatial transform
/// hits the image and both masks; intensity changes touch the image only.
inline SegSample augment(const SegSample& s, const AugmentConfig& cfg, std::mt19937_64& rng) {
    return apply_augmentation(s, draw_augmentation(cfg, rng));
}

inline std::string format_case_id(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "case%03d", index);
    return buf;
}

struct SynthParams {
    double perturb = 0.04;        ///< non-expert boundary offset amplitude, fraction of size
    double speckle = 0.3;         ///< std of the multiplicative speckle
    double foreground = 0.65;
    double background = 0.35;
    double blur = 1.5;            ///< boundary softness in pixels
    int slices_per_case = 8;
    int case_offset = 0;
    Spacing spacing{};
};

namespace detail {

struct BlobShape {
    double cy, cx, r0;
    std::array<double, 3> amp, phase;          // harmonics 2..4 of the capsule outline
    std::array<double, 6> dev_amp, dev_phase;  // harmonics 0, 3..7 of the annotator deviation
    double dev_norm;

    double radius(double theta) const {
        double r = 1.0;
        for (int k = 0; k < 3; ++k) r += amp[k] * std::cos((k + 2) * theta + phase[k]);
        return r0 * r;
    }
    // Signed deviation in [-1, 1].
    double deviation(double theta) const {
        double d = dev_amp[0];
        for (int k = 1; k < 6; ++k) d += dev_amp[k] * std::cos((k + 2) * theta + dev_phase[k]);
        return d / dev_norm;
    }
};

}  // namespace detail

/// Synthetic fuzzy-boundary data: a smooth blob as the expert mask, a noisy
/// low-contrast image, and a non-expert mask whose disagreement with the
/// expert lies along the boundary. Sample i depends only on (seed, i).
inline std::vector<SegSample> synth_generate(int count, int size, const SynthParams& params, std::uint64_t seed) {
    if (count < 1) throw InvalidInput("synth_generate: count must be >= 1");
    if (size < 16) throw InvalidInput("synth_generate: size must be >= 16");
    if (params.slices_per_case < 1) throw InvalidInput("synth_generate: slices_per_case must be >= 1");
    if (!(params.perturb >= 0)) throw InvalidInput("synth_generate: perturbation must be >= 0");
    std::vector<SegSample> out;
    out.reserve(static_cast<std::size_t>(count));
    const double n = size;
    for (int i = 0; i < count; ++i) {
        auto rng = derived_rng(seed, static_cast<std::uint64_t>(i), 0x5e9);
        detail::BlobShape b{};
        b.cy = n / 2 + uniform(rng, -0.1, 0.1) * n;
        b.cx = n / 2 + uniform(rng, -0.1, 0.1) * n;
        b.r0 = uniform(rng, 0.18, 0.28) * n;
        for (int k = 0; k < 3; ++k) {
            b.amp[k] = uniform(rng, 0.0, 0.08);
            b.phase[k] = uniform(rng, 0.0, 2 * std::numbers::pi);
        }
        b.dev_norm = 0.0;
        for (int k = 0; k < 6; ++k) {
            b.dev_amp[k] = uniform(rng, -1.0, 1.0);
            b.dev_phase[k] = uniform(rng, 0.0, 2 * std::numbers::pi);
            b.dev_norm += std::abs(b.dev_amp[k]);
        }
        const double ramp_y = uniform(rng, -0.15, 0.15), ramp_x = uniform(rng, -0.15, 0.15);
        std::gamma_distribution<double> speckle(1.0 / (params.speckle * params.speckle),
                                                params.speckle * params.speckle);

        SegSample s;
        s.case_id = format_case_id(i / params.slices_per_case + params.case_offset);
        s.slice_index = i % params.slices_per_case;
        s.spacing = params.spacing;
        s.expert_mask = Mask(size, size);
        s.nonexpert_mask = Mask(size, size);
        RealGrid raw(size, size);
        for (int r = 0; r < size; ++r) {
            for (int c = 0; c < size; ++c) {
                const double dy = r - b.cy, dx = c - b.cx;
                const double dist = std::hypot(dy, dx);
                const double theta = std::atan2(dy, dx);
                const double rad = b.radius(theta);
                const double offset = params.perturb * n * b.deviation(theta);
                s.expert_mask(r, c) = dist <= rad ? 1 : 0;
                s.nonexpert_mask(r, c) = dist <= rad + offset ? 1 : 0;
                const double inside = 1.0 / (1.0 + std::exp((dist - rad) / params.blur));
                double v = params.background + (params.foreground - params.background) * inside;
                v *= 1.0 + ramp_y * (r / n - 0.5) + ramp_x * (c / n - 0.5);
                if (params.speckle > 0) v *= speckle(rng);
                raw(r, c) = v;
            }
        }
        s.image = normalize(raw);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace capseg
