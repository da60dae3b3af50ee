#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "capseg/grid.hpp"

namespace capseg::io {

struct RgbImage {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> data;  ///< interleaved RGB

    RgbImage() = default;
    RgbImage(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c * 3, 0) {}
    void set(std::size_t r, std::size_t c, std::array<std::uint8_t, 3> rgb) {
        if (r >= rows || c >= cols) return;
        auto* p = &data[(r * cols + c) * 3];
        p[0] = rgb[0];
        p[1] = rgb[1];
        p[2] = rgb[2];
    }
};

class PngError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void write_png(const std::filesystem::path& path, std::size_t rows, std::size_t cols, int color_type,
                      int channels, const std::uint8_t* data) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw PngError("cannot open for writing: " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw PngError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw PngError("failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(cols), static_cast<png_uint_32>(rows), 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t r = 0; r < rows; ++r) {
        png_write_row(png, const_cast<png_bytep>(data + r * cols * channels));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace detail

/// Reads any PNG and converts it to 8-bit grayscale.
inline Grid<std::uint8_t> read_gray_png(const std::filesystem::path& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw PngError("cannot open: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw PngError("libpng initialisation failed");
    }
    std::vector<std::uint8_t> pixels;
    std::vector<png_bytep> row_ptrs;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw PngError("unreadable PNG: " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE)
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_read_update_info(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    pixels.resize(stride * h);
    row_ptrs.resize(h);
    for (png_uint_32 r = 0; r < h; ++r) row_ptrs[r] = pixels.data() + r * stride;
    png_read_image(png, row_ptrs.data());
    png_destroy_read_struct(&png, &info, nullptr);

    Grid<std::uint8_t> out(h, w);
    for (png_uint_32 r = 0; r < h; ++r)
        for (png_uint_32 c = 0; c < w; ++c) out(r, c) = pixels[r * stride + c];
    return out;
}

inline void write_gray_png(const std::filesystem::path& path, const Grid<std::uint8_t>& img) {
    detail::write_png(path, img.rows(), img.cols(), PNG_COLOR_TYPE_GRAY, 1, img.storage().data());
}

inline void write_rgb_png(const std::filesystem::path& path, const RgbImage& img) {
    detail::write_png(path, img.rows, img.cols, PNG_COLOR_TYPE_RGB, 3, img.data.data());
}

/// [0,1] intensities to 8-bit with rounding.
inline Grid<std::uint8_t> to_u8(const RealGrid& g) {
    Grid<std::uint8_t> out(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = std::clamp(g[i], 0.0, 1.0);
        out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return out;
}

inline Grid<std::uint8_t> mask_to_u8(const Mask& m) {
    Grid<std::uint8_t> out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] ? 255 : 0;
    return out;
}

}  // namespace capseg::io
