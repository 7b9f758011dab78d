#include "veinmatch/infer32.hpp"

#include <algorithm>
#include <cmath>

namespace veinmatch {

namespace {

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

} // namespace

Infer32::Infer32(const ModelParams& params) : spec_(params.spec) {
    spec_.validate();
    for (const auto& [name, t] : params.tensors) {
        TensorF tf;
        tf.shape = t.shape();
        tf.data.reserve(t.size());
        for (double v : t.values()) tf.data.push_back(static_cast<float>(v));
        tensors_.emplace(name, std::move(tf));
    }
}

const Infer32::TensorF& Infer32::tensor(const std::string& name) const {
    const auto it = tensors_.find(name);
    if (it == tensors_.end())
        throw ConstraintError("Infer32: missing parameter " + name);
    return it->second;
}

namespace {

struct MapF {
    std::size_t c = 0, h = 0, w = 0;
    std::vector<float> data;

    void resize(std::size_t cc, std::size_t hh, std::size_t ww) {
        c = cc;
        h = hh;
        w = ww;
        data.assign(cc * hh * ww, 0.0f);
    }
    float* chan(std::size_t ch) { return data.data() + ch * h * w; }
    const float* chan(std::size_t ch) const { return data.data() + ch * h * w; }
};

// Same-padding cross-correlation, stride 1, fused relu. The kx loop runs over
// contiguous rows of input and output so the compiler can vectorize it.
void conv_same(const MapF& in, const std::vector<float>& kernels,
               const std::vector<float>& bias, std::size_t cout, std::size_t k,
               bool fuse_relu, MapF& out) {
    const std::size_t pad = k / 2;
    out.resize(cout, in.h, in.w);
    const std::size_t h = in.h, w = in.w;
    for (std::size_t oc = 0; oc < cout; ++oc) {
        float* ochan = out.chan(oc);
        std::fill(ochan, ochan + h * w, bias[oc]);
        for (std::size_t ic = 0; ic < in.c; ++ic) {
            const float* ichan = in.chan(ic);
            const float* kbase = kernels.data() + ((oc * in.c + ic) * k) * k;
            for (std::size_t ky = 0; ky < k; ++ky) {
                const std::ptrdiff_t yoff =
                    static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(pad);
                const std::size_t oy_lo = yoff < 0 ? static_cast<std::size_t>(-yoff) : 0;
                const std::size_t oy_hi =
                    yoff > 0 ? h - static_cast<std::size_t>(yoff) : h;
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const float wv = kbase[ky * k + kx];
                    const std::ptrdiff_t xoff = static_cast<std::ptrdiff_t>(kx) -
                                                static_cast<std::ptrdiff_t>(pad);
                    const std::size_t ox_lo =
                        xoff < 0 ? static_cast<std::size_t>(-xoff) : 0;
                    const std::size_t ox_hi =
                        xoff > 0 ? w - static_cast<std::size_t>(xoff) : w;
                    for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                        const float* irow =
                            ichan + (static_cast<std::size_t>(
                                        static_cast<std::ptrdiff_t>(oy) + yoff)) *
                                        w +
                            xoff;
                        float* orow = ochan + oy * w;
                        for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                            orow[ox] += wv * irow[ox];
                    }
                }
            }
        }
        if (fuse_relu)
            for (std::size_t i = 0; i < h * w; ++i)
                if (ochan[i] < 0.0f) ochan[i] = 0.0f;
    }
}

void maxpool2(MapF& m) {
    const std::size_t oh = m.h / 2, ow = m.w / 2;
    MapF out;
    out.resize(m.c, oh, ow);
    for (std::size_t c = 0; c < m.c; ++c) {
        const float* src = m.chan(c);
        float* dst = out.chan(c);
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                const float* p = src + (2 * y) * m.w + 2 * x;
                const float a = std::max(p[0], p[1]);
                const float b = std::max(p[m.w], p[m.w + 1]);
                dst[y * ow + x] = std::max(a, b);
            }
    }
    m = std::move(out);
}

} // namespace

std::vector<double> Infer32::embed(const Tensor& x) const {
    if (x.rank() != 3 || x.extent(0) != spec_.input_channels ||
        x.extent(1) != spec_.input_height || x.extent(2) != spec_.input_width)
        throw DimensionError("Infer32: input shape " + x.shape_string() +
                             " does not match spec");

    MapF m;
    m.resize(x.extent(0), x.extent(1), x.extent(2));
    for (std::size_t i = 0; i < x.size(); ++i) m.data[i] = static_cast<float>(x[i]);

    const std::string tap = spec_.resolved_tap();
    MapF tap_map;

    if (spec_.spatial_attention) {
        MapF pooled;
        pooled.resize(2, m.h, m.w);
        const std::size_t hw = m.h * m.w;
        for (std::size_t i = 0; i < hw; ++i) {
            float sum = 0.0f, mx = m.data[i];
            for (std::size_t c = 0; c < m.c; ++c) {
                const float v = m.data[c * hw + i];
                sum += v;
                mx = std::max(mx, v);
            }
            pooled.data[i] = sum / static_cast<float>(m.c);
            pooled.data[hw + i] = mx;
        }
        MapF att;
        conv_same(pooled, tensor("spatial_attention.conv.weight").data,
                  tensor("spatial_attention.conv.bias").data, 1, 7, false, att);
        for (std::size_t i = 0; i < hw; ++i) att.data[i] = sigmoidf(att.data[i]);
        for (std::size_t c = 0; c < m.c; ++c) {
            float* chan = m.chan(c);
            for (std::size_t i = 0; i < hw; ++i) chan[i] *= att.data[i];
        }
    }
    if (tap == "input") tap_map = m;

    MapF next;
    for (std::size_t k = 0; k < spec_.blocks.size(); ++k) {
        const BlockSpec& b = spec_.blocks[k];
        const std::string prefix = "block" + std::to_string(k + 1);
        for (std::size_t j = 0; j < b.convs; ++j) {
            const std::string conv = prefix + ".conv" + std::to_string(j + 1);
            conv_same(m, tensor(conv + ".weight").data, tensor(conv + ".bias").data,
                      b.channels, b.kernel, true, next);
            std::swap(m, next);
        }
        if (b.channel_attention) {
            const std::size_t hw = m.h * m.w;
            std::vector<float> avg(m.c), mx(m.c);
            for (std::size_t c = 0; c < m.c; ++c) {
                const float* chan = m.chan(c);
                float sum = 0.0f, best = chan[0];
                for (std::size_t i = 0; i < hw; ++i) {
                    sum += chan[i];
                    best = std::max(best, chan[i]);
                }
                avg[c] = sum / static_cast<float>(hw);
                mx[c] = best;
            }
            const TensorF& w1 = tensor(prefix + ".ca.fc1.weight");
            const TensorF& b1 = tensor(prefix + ".ca.fc1.bias");
            const TensorF& w2 = tensor(prefix + ".ca.fc2.weight");
            const TensorF& b2 = tensor(prefix + ".ca.fc2.bias");
            const std::size_t red = w1.shape[0];
            auto mlp = [&](const std::vector<float>& in, std::vector<float>& out) {
                std::vector<float> hid(red);
                for (std::size_t i = 0; i < red; ++i) {
                    float acc = b1.data[i];
                    for (std::size_t j2 = 0; j2 < m.c; ++j2)
                        acc += w1.data[i * m.c + j2] * in[j2];
                    hid[i] = acc > 0.0f ? acc : 0.0f;
                }
                out.resize(m.c);
                for (std::size_t i = 0; i < m.c; ++i) {
                    float acc = b2.data[i];
                    for (std::size_t j2 = 0; j2 < red; ++j2)
                        acc += w2.data[i * red + j2] * hid[j2];
                    out[i] = acc;
                }
            };
            std::vector<float> pa, pm;
            mlp(avg, pa);
            mlp(mx, pm);
            for (std::size_t c = 0; c < m.c; ++c) {
                const float gate = sigmoidf(pa[c] + pm[c]);
                float* chan = m.chan(c);
                for (std::size_t i = 0; i < hw; ++i) chan[i] *= gate;
            }
        }
        if (b.pool) maxpool2(m);
        if (tap == prefix + ".out") tap_map = m;
    }

    std::vector<double> out(tap_map.data.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<double>(tap_map.data[i]);
    return out;
}

std::vector<double> Infer32::embed(const GrayImage& img) const {
    return embed(to_tensor(img));
}

} // namespace veinmatch
