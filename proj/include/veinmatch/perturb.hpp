#pragma once

#include <cstdint>

#include "veinmatch/gray_image.hpp"

namespace veinmatch {

enum class PerturbTag { BLUR, NOISE, ROTATE };

struct Perturbation {
    PerturbTag tag = PerturbTag::BLUR;
    double sigma = 0.0;      // blur kernel std-dev / noise std-dev, >= 0
    double angle_deg = 0.0;  // rotation angle
    std::uint64_t seed = 0;  // makes NOISE deterministic

    static Perturbation blur(double sigma) { return {PerturbTag::BLUR, sigma, 0.0, 0}; }
    static Perturbation noise(double sigma, std::uint64_t seed) {
        return {PerturbTag::NOISE, sigma, 0.0, seed};
    }
    static Perturbation rotate(double angle_deg) {
        return {PerturbTag::ROTATE, 0.0, angle_deg, 0};
    }
};

GrayImage perturb(const GrayImage& img, const Perturbation& p);

} // namespace veinmatch
