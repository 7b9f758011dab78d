#pragma once

#include "veinmatch/gray_image.hpp"

namespace veinmatch {

enum class EnhanceTag { HIST_EQ, CLAHE, LAPLACIAN, LOG };

// One of the four optical enhancement operators. Parameters are only read
// for the tags that use them.
struct EnhanceMethod {
    EnhanceTag tag = EnhanceTag::HIST_EQ;
    double clahe_clip_limit = 2.0; // > 1, normalized against the uniform bin level
    std::size_t clahe_tiles_x = 8; // >= 1
    std::size_t clahe_tiles_y = 8; // >= 1
    double log_scale = 0.0;        // > 0; 0 selects the full-range default

    static EnhanceMethod hist_eq() { return {EnhanceTag::HIST_EQ}; }
    static EnhanceMethod clahe(double clip = 2.0, std::size_t tx = 8, std::size_t ty = 8) {
        EnhanceMethod m;
        m.tag = EnhanceTag::CLAHE;
        m.clahe_clip_limit = clip;
        m.clahe_tiles_x = tx;
        m.clahe_tiles_y = ty;
        return m;
    }
    static EnhanceMethod laplacian() { return {EnhanceTag::LAPLACIAN}; }
    static EnhanceMethod log_transform(double c = 0.0) {
        EnhanceMethod m;
        m.tag = EnhanceTag::LOG;
        m.log_scale = c;
        return m;
    }
};

// Default LOG scale: maps 255 back to 255 exactly.
double default_log_scale();

GrayImage enhance(const GrayImage& img, const EnhanceMethod& method);

} // namespace veinmatch
