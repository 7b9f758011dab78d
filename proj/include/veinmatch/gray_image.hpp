#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "veinmatch/errors.hpp"
#include "veinmatch/tensor.hpp"

namespace veinmatch {

// 8-bit grayscale raster, row-major.
struct GrayImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;

    GrayImage() = default;
    GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = 0)
        : width(w), height(h), pixels(w * h, fill) {
        if (w == 0 || h == 0) throw DimensionError("GrayImage: zero dimension");
    }
    GrayImage(std::size_t w, std::size_t h, std::vector<std::uint8_t> px)
        : width(w), height(h), pixels(std::move(px)) {
        if (w == 0 || h == 0) throw DimensionError("GrayImage: zero dimension");
        if (pixels.size() != w * h)
            throw DimensionError("GrayImage: pixel count does not match dimensions");
    }

    std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
    std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

    bool operator==(const GrayImage& o) const {
        return width == o.width && height == o.height && pixels == o.pixels;
    }
};

// Extracts a side x side window centered at (center_x, center_y). Windows
// reaching past the border are shifted inward, never padded.
GrayImage crop_roi(const GrayImage& img, std::size_t center_x, std::size_t center_y,
                   std::size_t side);

// [1, H, W] tensor with intensities scaled to [0, 1].
Tensor to_tensor(const GrayImage& img);

// Binary PGM (P5, maxval 255). Round-trips bit-exactly.
GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const GrayImage& img, const std::filesystem::path& path);

// Rounds half away from zero; all imaging code quantizes through this so
// results stay platform-identical.
inline std::uint8_t clamp_round_u8(double v) {
    double r = std::floor(v + 0.5);
    if (r < 0.0) r = 0.0;
    if (r > 255.0) r = 255.0;
    return static_cast<std::uint8_t>(r);
}

} // namespace veinmatch
