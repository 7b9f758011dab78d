#include "veinmatch/perturb.hpp"

#include <cmath>
#include <vector>

#include "veinmatch/rng.hpp"

namespace veinmatch {

namespace {

// Separable Gaussian, radius ceil(3*sigma), edge-replicate. Both passes run
// in doubles; quantization happens once at the end.
GrayImage gaussian_blur(const GrayImage& img, double sigma) {
    if (!(sigma >= 0.0)) throw ParamError("perturb: blur sigma must be >= 0");
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    if (radius == 0) return img;

    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (static_cast<double>(i) / sigma) *
                                  (static_cast<double>(i) / sigma));
        kernel[static_cast<std::size_t>(i + radius)] = v;
        sum += v;
    }
    for (double& k : kernel) k /= sum;

    const auto W = static_cast<std::ptrdiff_t>(img.width);
    const auto H = static_cast<std::ptrdiff_t>(img.height);
    auto clampi = [](std::ptrdiff_t v, std::ptrdiff_t hi) {
        return std::clamp<std::ptrdiff_t>(v, 0, hi);
    };

    std::vector<double> tmp(img.pixels.size());
    for (std::ptrdiff_t y = 0; y < H; ++y)
        for (std::ptrdiff_t x = 0; x < W; ++x) {
            double acc = 0.0;
            for (std::ptrdiff_t i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] *
                       img.pixels[static_cast<std::size_t>(y * W + clampi(x + i, W - 1))];
            tmp[static_cast<std::size_t>(y * W + x)] = acc;
        }

    GrayImage out(img.width, img.height);
    for (std::ptrdiff_t y = 0; y < H; ++y)
        for (std::ptrdiff_t x = 0; x < W; ++x) {
            double acc = 0.0;
            for (std::ptrdiff_t i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] *
                       tmp[static_cast<std::size_t>(clampi(y + i, H - 1) * W + x)];
            out.pixels[static_cast<std::size_t>(y * W + x)] = clamp_round_u8(acc);
        }
    return out;
}

GrayImage add_noise(const GrayImage& img, double sigma, std::uint64_t seed) {
    if (!(sigma >= 0.0)) throw ParamError("perturb: noise sigma must be >= 0");
    if (sigma == 0.0) return img;
    Rng rng(mix_seed(seed, "perturb.noise"));
    GrayImage out(img.width, img.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        out.pixels[i] = clamp_round_u8(static_cast<double>(img.pixels[i]) +
                                       rng.normal(0.0, sigma));
    return out;
}

// Inverse-mapped rotation about the image center, bilinear sampling,
// background fill 0.
GrayImage rotate(const GrayImage& img, double angle_deg) {
    const double a = angle_deg * M_PI / 180.0;
    const double ca = std::cos(a), sa = std::sin(a);
    if (angle_deg == 0.0) return img;

    const double cx = (static_cast<double>(img.width) - 1.0) / 2.0;
    const double cy = (static_cast<double>(img.height) - 1.0) / 2.0;
    const auto W = static_cast<std::ptrdiff_t>(img.width);
    const auto H = static_cast<std::ptrdiff_t>(img.height);

    GrayImage out(img.width, img.height);
    for (std::ptrdiff_t y = 0; y < H; ++y) {
        for (std::ptrdiff_t x = 0; x < W; ++x) {
            const double dx = static_cast<double>(x) - cx;
            const double dy = static_cast<double>(y) - cy;
            const double sx = ca * dx + sa * dy + cx;
            const double sy = -sa * dx + ca * dy + cy;
            const double fx = std::floor(sx), fy = std::floor(sy);
            const auto ix = static_cast<std::ptrdiff_t>(fx);
            const auto iy = static_cast<std::ptrdiff_t>(fy);
            auto sample = [&](std::ptrdiff_t px, std::ptrdiff_t py) -> double {
                if (px < 0 || py < 0 || px >= W || py >= H) return 0.0;
                return img.pixels[static_cast<std::size_t>(py * W + px)];
            };
            const double wx = sx - fx, wy = sy - fy;
            const double v = (1.0 - wy) * ((1.0 - wx) * sample(ix, iy) +
                                           wx * sample(ix + 1, iy)) +
                             wy * ((1.0 - wx) * sample(ix, iy + 1) +
                                   wx * sample(ix + 1, iy + 1));
            out.pixels[static_cast<std::size_t>(y * W + x)] = clamp_round_u8(v);
        }
    }
    return out;
}

} // namespace

GrayImage perturb(const GrayImage& img, const Perturbation& p) {
    switch (p.tag) {
        case PerturbTag::BLUR:
            return gaussian_blur(img, p.sigma);
        case PerturbTag::NOISE:
            return add_noise(img, p.sigma, p.seed);
        case PerturbTag::ROTATE:
            return rotate(img, p.angle_deg);
    }
    throw ParamError("perturb: unknown perturbation tag");
}

} // namespace veinmatch
