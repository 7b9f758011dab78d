#include "veinmatch/enhance.hpp"

#include <array>
#include <cmath>

namespace veinmatch {

double default_log_scale() { return 255.0 / std::log(256.0); }

namespace {

GrayImage hist_eq(const GrayImage& img) {
    std::array<std::size_t, 256> hist{};
    for (std::uint8_t p : img.pixels) ++hist[p];
    const double total = static_cast<double>(img.pixels.size());
    std::array<std::uint8_t, 256> lut{};
    std::size_t cum = 0;
    for (int v = 0; v < 256; ++v) {
        cum += hist[v];
        lut[v] = clamp_round_u8(static_cast<double>(cum) / total * 255.0);
    }
    GrayImage out(img.width, img.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        out.pixels[i] = lut[img.pixels[i]];
    return out;
}

// Equalization LUT for one tile: histogram clipped at
// clip_limit * (pixel count / 256), excess redistributed uniformly with the
// remainder spread round-robin over unclipped bins.
std::array<std::uint8_t, 256> clahe_tile_lut(const std::array<std::size_t, 256>& hist,
                                             std::size_t npix, double clip_limit) {
    std::array<double, 256> h{};
    for (int v = 0; v < 256; ++v) h[v] = static_cast<double>(hist[v]);

    const double limit = std::max(1.0, clip_limit * static_cast<double>(npix) / 256.0);
    double excess = 0.0;
    for (int v = 0; v < 256; ++v) {
        if (h[v] > limit) {
            excess += h[v] - limit;
            h[v] = limit;
        }
    }
    const double bonus = excess / 256.0;
    for (int v = 0; v < 256; ++v) h[v] += bonus;

    std::array<std::uint8_t, 256> lut{};
    double cum = 0.0;
    const double total = static_cast<double>(npix);
    for (int v = 0; v < 256; ++v) {
        cum += h[v];
        lut[v] = clamp_round_u8(cum / total * 255.0);
    }
    return lut;
}

GrayImage clahe(const GrayImage& img, double clip_limit, std::size_t tiles_x,
                std::size_t tiles_y) {
    if (!(clip_limit > 1.0))
        throw ParamError("enhance: CLAHE clip limit must be > 1");
    if (tiles_x < 1 || tiles_y < 1)
        throw ParamError("enhance: CLAHE tile grid must be at least 1x1");
    tiles_x = std::min(tiles_x, img.width);
    tiles_y = std::min(tiles_y, img.height);

    const std::size_t gx = tiles_x, gy = tiles_y;
    auto x_edge = [&](std::size_t t) { return t * img.width / gx; };
    auto y_edge = [&](std::size_t t) { return t * img.height / gy; };

    std::vector<std::array<std::uint8_t, 256>> luts(gx * gy);
    std::vector<double> cx(gx), cy(gy);
    for (std::size_t ty = 0; ty < gy; ++ty) {
        for (std::size_t tx = 0; tx < gx; ++tx) {
            const std::size_t x0 = x_edge(tx), x1 = x_edge(tx + 1);
            const std::size_t y0 = y_edge(ty), y1 = y_edge(ty + 1);
            std::array<std::size_t, 256> hist{};
            for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t x = x0; x < x1; ++x)
                    ++hist[img.at(x, y)];
            luts[ty * gx + tx] = clahe_tile_lut(hist, (x1 - x0) * (y1 - y0), clip_limit);
            cx[tx] = (static_cast<double>(x0) + static_cast<double>(x1) - 1.0) / 2.0;
            cy[ty] = (static_cast<double>(y0) + static_cast<double>(y1) - 1.0) / 2.0;
        }
    }

    // Position of a pixel between the two bracketing tile centers along one
    // axis; clamped flat beyond the outermost centers.
    auto locate = [](double pos, const std::vector<double>& centers, std::size_t& lo,
                     std::size_t& hi, double& frac) {
        if (pos <= centers.front()) {
            lo = hi = 0;
            frac = 0.0;
            return;
        }
        if (pos >= centers.back()) {
            lo = hi = centers.size() - 1;
            frac = 0.0;
            return;
        }
        std::size_t i = 0;
        while (centers[i + 1] < pos) ++i;
        lo = i;
        hi = i + 1;
        frac = (pos - centers[lo]) / (centers[hi] - centers[lo]);
    };

    GrayImage out(img.width, img.height);
    for (std::size_t y = 0; y < img.height; ++y) {
        std::size_t ty0, ty1;
        double fy;
        locate(static_cast<double>(y), cy, ty0, ty1, fy);
        for (std::size_t x = 0; x < img.width; ++x) {
            std::size_t tx0, tx1;
            double fx;
            locate(static_cast<double>(x), cx, tx0, tx1, fx);
            const std::uint8_t v = img.at(x, y);
            const double m00 = luts[ty0 * gx + tx0][v];
            const double m01 = luts[ty0 * gx + tx1][v];
            const double m10 = luts[ty1 * gx + tx0][v];
            const double m11 = luts[ty1 * gx + tx1][v];
            const double top = m00 + (m01 - m00) * fx;
            const double bot = m10 + (m11 - m10) * fx;
            out.at(x, y) = clamp_round_u8(top + (bot - top) * fy);
        }
    }
    return out;
}

// img + [[0,-1,0],[-1,4,-1],[0,-1,0]] * img, edge-replicated, clamped.
GrayImage laplacian_sharpen(const GrayImage& img) {
    GrayImage out(img.width, img.height);
    const auto W = static_cast<std::ptrdiff_t>(img.width);
    const auto H = static_cast<std::ptrdiff_t>(img.height);
    auto sample = [&](std::ptrdiff_t x, std::ptrdiff_t y) {
        x = std::clamp<std::ptrdiff_t>(x, 0, W - 1);
        y = std::clamp<std::ptrdiff_t>(y, 0, H - 1);
        return static_cast<int>(img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)));
    };
    for (std::ptrdiff_t y = 0; y < H; ++y) {
        for (std::ptrdiff_t x = 0; x < W; ++x) {
            const int v = 5 * sample(x, y) - sample(x - 1, y) - sample(x + 1, y) -
                          sample(x, y - 1) - sample(x, y + 1);
            out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) =
                static_cast<std::uint8_t>(std::clamp(v, 0, 255));
        }
    }
    return out;
}

GrayImage log_transform(const GrayImage& img, double c) {
    if (c == 0.0) c = default_log_scale();
    if (!(c > 0.0)) throw ParamError("enhance: LOG scale must be > 0");
    std::array<std::uint8_t, 256> lut{};
    for (int v = 0; v < 256; ++v)
        lut[v] = clamp_round_u8(c * std::log(1.0 + static_cast<double>(v)));
    GrayImage out(img.width, img.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        out.pixels[i] = lut[img.pixels[i]];
    return out;
}

} // namespace

GrayImage enhance(const GrayImage& img, const EnhanceMethod& method) {
    switch (method.tag) {
        case EnhanceTag::HIST_EQ:
            return hist_eq(img);
        case EnhanceTag::CLAHE:
            return clahe(img, method.clahe_clip_limit, method.clahe_tiles_x,
                         method.clahe_tiles_y);
        case EnhanceTag::LAPLACIAN:
            return laplacian_sharpen(img);
        case EnhanceTag::LOG:
            return log_transform(img, method.log_scale);
    }
    throw ParamError("enhance: unknown method tag");
}

} // namespace veinmatch
