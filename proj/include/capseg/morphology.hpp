#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "capseg/grid.hpp"

namespace capseg {

namespace detail {

// Separable square min/max filter. Pixels outside the grid count as `border`.
inline Mask square_filter(const Mask& in, int kernel_size, bool take_max, std::uint8_t border) {
    if (kernel_size < 1 || kernel_size % 2 == 0) {
        throw InvalidInput("kernel size must be odd and >= 1, got " + std::to_string(kernel_size));
    }
    const int radius = kernel_size / 2;
    const auto rows = static_cast<int>(in.rows());
    const auto cols = static_cast<int>(in.cols());
    auto pass = [&](const Mask& src, bool horizontal) {
        Mask dst(src.rows(), src.cols());
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < cols; ++c) {
                std::uint8_t acc = take_max ? 0 : 1;
                for (int d = -radius; d <= radius; ++d) {
                    const int rr = horizontal ? r : r + d;
                    const int cc = horizontal ? c + d : c;
                    std::uint8_t v = border;
                    if (rr >= 0 && rr < rows && cc >= 0 && cc < cols) v = src(rr, cc) ? 1 : 0;
                    acc = take_max ? std::max(acc, v) : std::min(acc, v);
                }
                dst(r, c) = acc;
            }
        }
        return dst;
    };
    return pass(pass(in, true), false);
}

}  // namespace detail

/// Binary dilation with a square all-ones structuring element of side
/// `kernel_size`; zero padding at the borders.
inline Mask dilate(const Mask& mask, int kernel_size) {
    return detail::square_filter(mask, kernel_size, true, 0);
}

/// Binary erosion with a square structuring element; outside pixels are background.
inline Mask erode(const Mask& mask, int kernel_size) {
    return detail::square_filter(mask, kernel_size, false, 0);
}

inline Mask opening(const Mask& mask, int kernel_size) {
    return dilate(erode(mask, kernel_size), kernel_size);
}

/// Labels 8-connected foreground components. Returns labels (0 = background,
/// 1..n) and the pixel count of each component (index 0 unused).
inline std::pair<Grid<int>, std::vector<std::size_t>> label_components(const Mask& mask) {
    Grid<int> labels(mask.rows(), mask.cols(), 0);
    std::vector<std::size_t> sizes{0};
    const auto rows = static_cast<int>(mask.rows());
    const auto cols = static_cast<int>(mask.cols());
    std::vector<std::pair<int, int>> stack;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            if (!mask(r, c) || labels(r, c)) continue;
            const int label = static_cast<int>(sizes.size());
            std::size_t count = 0;
            stack.emplace_back(r, c);
            labels(r, c) = label;
            while (!stack.empty()) {
                auto [y, x] = stack.back();
                stack.pop_back();
                ++count;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int ny = y + dy, nx = x + dx;
                        if (ny < 0 || ny >= rows || nx < 0 || nx >= cols) continue;
                        if (mask(ny, nx) && !labels(ny, nx)) {
                            labels(ny, nx) = label;
                            stack.emplace_back(ny, nx);
                        }
                    }
                }
            }
            sizes.push_back(count);
        }
    }
    return {std::move(labels), std::move(sizes)};
}

/// Keeps only the largest 8-connected component (ties go to the first in raster order).
inline Mask largest_component(const Mask& mask) {
    auto [labels, sizes] = label_components(mask);
    if (sizes.size() <= 1) return Mask(mask.rows(), mask.cols(), 0);
    std::size_t best = 1;
    for (std::size_t i = 2; i < sizes.size(); ++i) {
        if (sizes[i] > sizes[best]) best = i;
    }
    Mask out(mask.rows(), mask.cols(), 0);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = labels[i] == static_cast<int>(best) ? 1 : 0;
    return out;
}

}  // namespace capseg
