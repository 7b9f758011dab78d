#include "veinmatch/tape.hpp"

#include <algorithm>
#include <cmath>

#include "veinmatch/rng.hpp"

namespace veinmatch {

const Tensor& Var::value() const {
    if (!tape_) throw ConstraintError("Var: default-constructed handle");
    return tape_->value(id_);
}

Tensor Gradients::wrt(const Var& v) const {
    if (v.id() < by_id_.size() && present_[v.id()]) return by_id_[v.id()];
    return Tensor(v.value().shape(), 0.0);
}

bool Gradients::reached(const Var& v) const {
    return v.id() < by_id_.size() && present_[v.id()];
}

Var Tape::push(Tensor value, std::vector<std::size_t> parents,
               std::function<Tensor(const std::vector<const Tensor*>&)> fwd,
               std::function<void(const Tensor&, const std::vector<const Tensor*>&,
                                  const Tensor&, const std::vector<Tensor*>&)>
                   bwd) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.forward = std::move(fwd);
    n.backward = std::move(bwd);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value, bool /*trainable*/) {
    return push(std::move(value), {}, nullptr, nullptr);
}

std::vector<const Tensor*> Tape::parent_values(const Node& n) const {
    std::vector<const Tensor*> pv;
    pv.reserve(n.parents.size());
    for (std::size_t p : n.parents) pv.push_back(&nodes_[p].value);
    return pv;
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    std::size_t cin, h, w, cout, kh, kw, stride, pad, oh, ow;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                   std::size_t stride, std::size_t pad) {
    if (input.rank() != 3) throw DimensionError("conv2d: input must be [C,H,W]");
    if (kernels.rank() != 4)
        throw DimensionError("conv2d: kernels must be [Cout,Cin,kH,kW]");
    if (bias.rank() != 1) throw DimensionError("conv2d: bias must be [Cout]");
    if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
    ConvDims d{};
    d.cin = input.extent(0);
    d.h = input.extent(1);
    d.w = input.extent(2);
    d.cout = kernels.extent(0);
    d.kh = kernels.extent(2);
    d.kw = kernels.extent(3);
    d.stride = stride;
    d.pad = pad;
    if (kernels.extent(1) != d.cin)
        throw DimensionError("conv2d: kernel Cin " + std::to_string(kernels.extent(1)) +
                             " != input channels " + std::to_string(d.cin));
    if (bias.extent(0) != d.cout)
        throw DimensionError("conv2d: bias length != Cout");
    if (d.kh > d.h + 2 * pad || d.kw > d.w + 2 * pad)
        throw DimensionError("conv2d: kernel larger than padded input");
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    return d;
}

// Output-column range [lo, hi) whose sampled input column stays in bounds for
// a given kernel column offset.
inline void valid_out_range(std::ptrdiff_t k_off, std::size_t in_extent,
                            std::size_t out_extent, std::size_t stride,
                            std::size_t& lo, std::size_t& hi) {
    // need 0 <= o*stride + k_off < in_extent
    std::ptrdiff_t lo_i = 0;
    if (k_off < 0)
        lo_i = (-k_off + static_cast<std::ptrdiff_t>(stride) - 1) /
               static_cast<std::ptrdiff_t>(stride);
    std::ptrdiff_t hi_i =
        (static_cast<std::ptrdiff_t>(in_extent) - 1 - k_off) /
            static_cast<std::ptrdiff_t>(stride) +
        1;
    hi_i = std::min<std::ptrdiff_t>(hi_i, static_cast<std::ptrdiff_t>(out_extent));
    lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(lo_i, 0));
    hi = static_cast<std::size_t>(std::max<std::ptrdiff_t>(hi_i, 0));
    if (hi < lo) hi = lo;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                      std::size_t stride, std::size_t pad) {
    const ConvDims d = conv_dims(input, kernels, bias, stride, pad);
    Tensor out({d.cout, d.oh, d.ow});
    const double* in = input.data();
    const double* kn = kernels.data();
    double* o = out.data();
    for (std::size_t oc = 0; oc < d.cout; ++oc) {
        const double b = bias[oc];
        double* ochan = o + oc * d.oh * d.ow;
        std::fill(ochan, ochan + d.oh * d.ow, b);
        for (std::size_t ic = 0; ic < d.cin; ++ic) {
            const double* ichan = in + ic * d.h * d.w;
            const double* kbase = kn + ((oc * d.cin + ic) * d.kh) * d.kw;
            for (std::size_t ky = 0; ky < d.kh; ++ky) {
                const std::ptrdiff_t yoff =
                    static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(pad);
                std::size_t oy_lo, oy_hi;
                valid_out_range(yoff, d.h, d.oh, stride, oy_lo, oy_hi);
                for (std::size_t kx = 0; kx < d.kw; ++kx) {
                    const double wv = kbase[ky * d.kw + kx];
                    if (wv == 0.0) continue;
                    const std::ptrdiff_t xoff = static_cast<std::ptrdiff_t>(kx) -
                                                static_cast<std::ptrdiff_t>(pad);
                    std::size_t ox_lo, ox_hi;
                    valid_out_range(xoff, d.w, d.ow, stride, ox_lo, ox_hi);
                    for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                        const std::size_t iy =
                            static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oy * stride) + yoff);
                        const double* irow = ichan + iy * d.w;
                        double* orow = ochan + oy * d.ow;
                        if (stride == 1) {
                            const double* ip = irow + static_cast<std::ptrdiff_t>(ox_lo) + xoff;
                            for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                                orow[ox] += wv * ip[ox - ox_lo];
                        } else {
                            for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                                const std::size_t ix = static_cast<std::size_t>(
                                    static_cast<std::ptrdiff_t>(ox * stride) + xoff);
                                orow[ox] += wv * irow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

void conv2d_backward(const Tensor& gout, const Tensor& input, const Tensor& kernels,
                     std::size_t stride, std::size_t pad, Tensor* gin, Tensor* gk,
                     Tensor* gb) {
    const std::size_t cout = kernels.extent(0), cin = kernels.extent(1);
    const std::size_t kh = kernels.extent(2), kw = kernels.extent(3);
    const std::size_t h = input.extent(1), w = input.extent(2);
    const std::size_t oh = gout.extent(1), ow = gout.extent(2);
    const double* g = gout.data();
    const double* in = input.data();
    const double* kn = kernels.data();

    if (gb) {
        for (std::size_t oc = 0; oc < cout; ++oc) {
            double acc = 0.0;
            const double* gchan = g + oc * oh * ow;
            for (std::size_t i = 0; i < oh * ow; ++i) acc += gchan[i];
            (*gb)[oc] += acc;
        }
    }
    for (std::size_t oc = 0; oc < cout; ++oc) {
        const double* gchan = g + oc * oh * ow;
        for (std::size_t ic = 0; ic < cin; ++ic) {
            const double* ichan = in + ic * h * w;
            double* ginchan = gin ? gin->data() + ic * h * w : nullptr;
            for (std::size_t ky = 0; ky < kh; ++ky) {
                const std::ptrdiff_t yoff =
                    static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(pad);
                std::size_t oy_lo, oy_hi;
                valid_out_range(yoff, h, oh, stride, oy_lo, oy_hi);
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const std::ptrdiff_t xoff = static_cast<std::ptrdiff_t>(kx) -
                                                static_cast<std::ptrdiff_t>(pad);
                    std::size_t ox_lo, ox_hi;
                    valid_out_range(xoff, w, ow, stride, ox_lo, ox_hi);
                    const double wv = kn[((oc * cin + ic) * kh + ky) * kw + kx];
                    double wacc = 0.0;
                    for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                        const std::size_t iy = static_cast<std::size_t>(
                            static_cast<std::ptrdiff_t>(oy * stride) + yoff);
                        const double* grow = gchan + oy * ow;
                        const double* irow = ichan + iy * w;
                        double* girow = ginchan ? ginchan + iy * w : nullptr;
                        for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                            const std::size_t ix = static_cast<std::size_t>(
                                static_cast<std::ptrdiff_t>(ox * stride) + xoff);
                            const double gv = grow[ox];
                            wacc += gv * irow[ix];
                            if (girow) girow[ix] += gv * wv;
                        }
                    }
                    if (gk) (*gk)[((oc * cin + ic) * kh + ky) * kw + kx] += wacc;
                }
            }
        }
    }
}

} // namespace

Var Tape::conv2d(Var input, Var kernels, Var bias, std::size_t stride, std::size_t pad) {
    Tensor out = conv2d_forward(input.value(), kernels.value(), bias.value(), stride, pad);
    auto fwd = [stride, pad](const std::vector<const Tensor*>& pv) {
        return conv2d_forward(*pv[0], *pv[1], *pv[2], stride, pad);
    };
    auto bwd = [stride, pad](const Tensor& gout, const std::vector<const Tensor*>& pv,
                             const Tensor&, const std::vector<Tensor*>& pg) {
        conv2d_backward(gout, *pv[0], *pv[1], stride, pad, pg[0], pg[1], pg[2]);
    };
    return push(std::move(out), {input.id(), kernels.id(), bias.id()}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// maxpool2d
// ---------------------------------------------------------------------------

namespace {

Tensor maxpool_forward(const Tensor& input, std::size_t k, std::size_t stride) {
    if (input.rank() != 3) throw DimensionError("maxpool2d: input must be [C,H,W]");
    const std::size_t c = input.extent(0), h = input.extent(1), w = input.extent(2);
    if (k > h || k > w)
        throw DimensionError("maxpool2d: window " + std::to_string(k) +
                             " exceeds input " + std::to_string(h) + "x" +
                             std::to_string(w));
    if (stride < 1) throw DimensionError("maxpool2d: stride must be >= 1");
    const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
    Tensor out({c, oh, ow});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double best = input.at3(ch, oy * stride, ox * stride);
                for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        const double v = input.at3(ch, oy * stride + dy, ox * stride + dx);
                        if (v > best) best = v;
                    }
                out.at3(ch, oy, ox) = best;
            }
    return out;
}

} // namespace

Var Tape::maxpool2d(Var input, std::size_t k, std::size_t stride) {
    Tensor out = maxpool_forward(input.value(), k, stride);
    auto fwd = [k, stride](const std::vector<const Tensor*>& pv) {
        return maxpool_forward(*pv[0], k, stride);
    };
    // Re-derives the argmax (first occurrence, row-major) from the stored
    // input; ties therefore route identically on every pass.
    auto bwd = [k, stride](const Tensor& gout, const std::vector<const Tensor*>& pv,
                           const Tensor&, const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        const Tensor& input = *pv[0];
        Tensor& gin = *pg[0];
        const std::size_t c = input.extent(0);
        const std::size_t oh = gout.extent(1), ow = gout.extent(2);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    std::size_t by = oy * stride, bx = ox * stride;
                    double best = input.at3(ch, by, bx);
                    for (std::size_t dy = 0; dy < k; ++dy)
                        for (std::size_t dx = 0; dx < k; ++dx) {
                            const double v =
                                input.at3(ch, oy * stride + dy, ox * stride + dx);
                            if (v > best) {
                                best = v;
                                by = oy * stride + dy;
                                bx = ox * stride + dx;
                            }
                        }
                    gin.at3(ch, by, bx) += gout.at3(ch, oy, ox);
                }
    };
    return push(std::move(out), {input.id()}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

namespace {

Tensor dense_forward(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2) throw DimensionError("dense: weight must be [m,n]");
    const std::size_t m = weight.extent(0), n = weight.extent(1);
    if (input.size() != n)
        throw DimensionError("dense: input size " + std::to_string(input.size()) +
                             " != weight columns " + std::to_string(n));
    if (bias.size() != m) throw DimensionError("dense: bias size != weight rows");
    Tensor out({m});
    const double* x = input.data();
    const double* w = weight.data();
    for (std::size_t i = 0; i < m; ++i) {
        double acc = bias[i];
        const double* wrow = w + i * n;
        for (std::size_t j = 0; j < n; ++j) acc += wrow[j] * x[j];
        out[i] = acc;
    }
    return out;
}

} // namespace

Var Tape::dense(Var input, Var weight, Var bias) {
    Tensor out = dense_forward(input.value(), weight.value(), bias.value());
    auto fwd = [](const std::vector<const Tensor*>& pv) {
        return dense_forward(*pv[0], *pv[1], *pv[2]);
    };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>& pv, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        const Tensor& input = *pv[0];
        const Tensor& weight = *pv[1];
        const std::size_t m = weight.extent(0), n = weight.extent(1);
        const double* x = input.data();
        const double* w = weight.data();
        for (std::size_t i = 0; i < m; ++i) {
            const double g = gout[i];
            if (pg[2]) (*pg[2])[i] += g;
            if (pg[1]) {
                double* gw = pg[1]->data() + i * n;
                for (std::size_t j = 0; j < n; ++j) gw[j] += g * x[j];
            }
            if (pg[0]) {
                double* gx = pg[0]->data();
                const double* wrow = w + i * n;
                for (std::size_t j = 0; j < n; ++j) gx[j] += g * wrow[j];
            }
        }
    };
    return push(std::move(out), {input.id(), weight.id(), bias.id()}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// pointwise
// ---------------------------------------------------------------------------

Var Tape::relu(Var x) {
    Tensor out = x.value();
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    auto fwd = [](const std::vector<const Tensor*>& pv) {
        Tensor t = *pv[0];
        for (double& v : t.values()) v = v > 0.0 ? v : 0.0;
        return t;
    };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>& pv, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        const Tensor& in = *pv[0];
        for (std::size_t i = 0; i < in.size(); ++i)
            if (in[i] > 0.0) (*pg[0])[i] += gout[i];
    };
    return push(std::move(out), {x.id()}, fwd, bwd);
}

Var Tape::sigmoid(Var x) {
    auto apply = [](Tensor t) {
        for (double& v : t.values()) v = 1.0 / (1.0 + std::exp(-v));
        return t;
    };
    Tensor out = apply(x.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0]); };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>&, const Tensor& out,
                  const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < out.size(); ++i)
            (*pg[0])[i] += gout[i] * out[i] * (1.0 - out[i]);
    };
    return push(std::move(out), {x.id()}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

namespace {

Tensor softmax_forward(const Tensor& z) {
    if (z.rank() != 1) throw DimensionError("softmax: input must be rank 1");
    Tensor out(z.shape());
    double mx = z[0];
    for (std::size_t i = 1; i < z.size(); ++i) mx = std::max(mx, z[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp(z[i] - mx);
        sum += out[i];
    }
    for (std::size_t i = 0; i < z.size(); ++i) out[i] /= sum;
    return out;
}

} // namespace

Var Tape::softmax(Var z) {
    Tensor out = softmax_forward(z.value());
    auto fwd = [](const std::vector<const Tensor*>& pv) { return softmax_forward(*pv[0]); };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>&, const Tensor& p,
                  const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        double dotgp = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) dotgp += gout[i] * p[i];
        for (std::size_t i = 0; i < p.size(); ++i)
            (*pg[0])[i] += p[i] * (gout[i] - dotgp);
    };
    return push(std::move(out), {z.id()}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

namespace {

// The mask is a pure function of (seed, element count), so forward replays
// and the backward pass reproduce it instead of sharing state.
void dropout_mask(std::uint64_t seed, double rate, std::size_t n,
                  std::vector<bool>& keep) {
    Rng rng(mix_seed(seed, "dropout"));
    keep.resize(n);
    for (std::size_t i = 0; i < n; ++i) keep[i] = rng.uniform() >= rate;
}

} // namespace

Var Tape::dropout(Var x, double rate, std::uint64_t seed, bool training) {
    if (!(rate >= 0.0 && rate < 1.0))
        throw ParamError("dropout: rate must be in [0,1)");
    if (!training || rate == 0.0) {
        Tensor out = x.value();
        auto fwd = [](const std::vector<const Tensor*>& pv) { return *pv[0]; };
        auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>&, const Tensor&,
                      const std::vector<Tensor*>& pg) {
            if (!pg[0]) return;
            for (std::size_t i = 0; i < gout.size(); ++i) (*pg[0])[i] += gout[i];
        };
        return push(std::move(out), {x.id()}, fwd, bwd);
    }
    const double inv_keep = 1.0 / (1.0 - rate);
    auto apply = [rate, seed, inv_keep](const Tensor& in) {
        std::vector<bool> keep;
        dropout_mask(seed, rate, in.size(), keep);
        Tensor out(in.shape());
        for (std::size_t i = 0; i < in.size(); ++i)
            out[i] = keep[i] ? in[i] * inv_keep : 0.0;
        return out;
    };
    Tensor out = apply(x.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0]); };
    auto bwd = [rate, seed, inv_keep](const Tensor& gout,
                                      const std::vector<const Tensor*>&, const Tensor&,
                                      const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        std::vector<bool> keep;
        dropout_mask(seed, rate, gout.size(), keep);
        for (std::size_t i = 0; i < gout.size(); ++i)
            if (keep[i]) (*pg[0])[i] += gout[i] * inv_keep;
    };
    return push(std::move(out), {x.id()}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// structural helpers
// ---------------------------------------------------------------------------

Var Tape::reshape(Var x, std::vector<std::size_t> shape) {
    Tensor out = x.value().reshaped(shape);
    auto fwd = [shape](const std::vector<const Tensor*>& pv) {
        return pv[0]->reshaped(shape);
    };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>&, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < gout.size(); ++i) (*pg[0])[i] += gout[i];
    };
    return push(std::move(out), {x.id()}, fwd, bwd);
}

Var Tape::concat_channels(Var a, Var b) {
    auto combine = [](const Tensor& ta, const Tensor& tb) {
        if (ta.rank() != 3 || tb.rank() != 3 || ta.extent(1) != tb.extent(1) ||
            ta.extent(2) != tb.extent(2))
            throw DimensionError("concat_channels: inputs must be [C,H,W] with equal H,W");
        Tensor out({ta.extent(0) + tb.extent(0), ta.extent(1), ta.extent(2)});
        std::copy(ta.data(), ta.data() + ta.size(), out.data());
        std::copy(tb.data(), tb.data() + tb.size(), out.data() + ta.size());
        return out;
    };
    Tensor out = combine(a.value(), b.value());
    auto fwd = [combine](const std::vector<const Tensor*>& pv) {
        return combine(*pv[0], *pv[1]);
    };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>& pv, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        const std::size_t na = pv[0]->size();
        if (pg[0])
            for (std::size_t i = 0; i < na; ++i) (*pg[0])[i] += gout[i];
        if (pg[1])
            for (std::size_t i = 0; i < pv[1]->size(); ++i)
                (*pg[1])[i] += gout[na + i];
    };
    return push(std::move(out), {a.id(), b.id()}, fwd, bwd);
}

Var Tape::channel_mean(Var x) {
    auto apply = [](const Tensor& in) {
        if (in.rank() != 3) throw DimensionError("channel_mean: input must be [C,H,W]");
        const std::size_t c = in.extent(0), hw = in.extent(1) * in.extent(2);
        Tensor out({1, in.extent(1), in.extent(2)});
        for (std::size_t i = 0; i < hw; ++i) {
            double acc = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) acc += in[ch * hw + i];
            out[i] = acc / static_cast<double>(c);
        }
        return out;
    };
    Tensor out = apply(x.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0]); };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>& pv, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        const std::size_t c = pv[0]->extent(0), hw = gout.size();
        const double inv = 1.0 / static_cast<double>(c);
        for (std::size_t i = 0; i < hw; ++i) {
            const double g = gout[i] * inv;
            for (std::size_t ch = 0; ch < c; ++ch) (*pg[0])[ch * hw + i] += g;
        }
    };
    return push(std::move(out), {x.id()}, fwd, bwd);
}

Var Tape::channel_max(Var x) {
    auto apply = [](const Tensor& in) {
        if (in.rank() != 3) throw DimensionError("channel_max: input must be [C,H,W]");
        const std::size_t c = in.extent(0), hw = in.extent(1) * in.extent(2);
        Tensor out({1, in.extent(1), in.extent(2)});
        for (std::size_t i = 0; i < hw; ++i) {
            double best = in[i];
            for (std::size_t ch = 1; ch < c; ++ch)
                best = std::max(best, in[ch * hw + i]);
            out[i] = best;
        }
        return out;
    };
    Tensor out = apply(x.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0]); };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>& pv, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        const Tensor& in = *pv[0];
        const std::size_t c = in.extent(0), hw = gout.size();
        for (std::size_t i = 0; i < hw; ++i) {
            std::size_t arg = 0;
            double best = in[i];
            for (std::size_t ch = 1; ch < c; ++ch)
                if (in[ch * hw + i] > best) {
                    best = in[ch * hw + i];
                    arg = ch;
                }
            (*pg[0])[arg * hw + i] += gout[i];
        }
    };
    return push(std::move(out), {x.id()}, fwd, bwd);
}

Var Tape::global_avg(Var x) {
    auto apply = [](const Tensor& in) {
        if (in.rank() != 3) throw DimensionError("global_avg: input must be [C,H,W]");
        const std::size_t c = in.extent(0), hw = in.extent(1) * in.extent(2);
        Tensor out({c});
        for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += in[ch * hw + i];
            out[ch] = acc / static_cast<double>(hw);
        }
        return out;
    };
    Tensor out = apply(x.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0]); };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>& pv, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        const std::size_t c = pv[0]->extent(0);
        const std::size_t hw = pv[0]->extent(1) * pv[0]->extent(2);
        const double inv = 1.0 / static_cast<double>(hw);
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double g = gout[ch] * inv;
            for (std::size_t i = 0; i < hw; ++i) (*pg[0])[ch * hw + i] += g;
        }
    };
    return push(std::move(out), {x.id()}, fwd, bwd);
}

Var Tape::global_max(Var x) {
    auto apply = [](const Tensor& in) {
        if (in.rank() != 3) throw DimensionError("global_max: input must be [C,H,W]");
        const std::size_t c = in.extent(0), hw = in.extent(1) * in.extent(2);
        Tensor out({c});
        for (std::size_t ch = 0; ch < c; ++ch) {
            double best = in[ch * hw];
            for (std::size_t i = 1; i < hw; ++i)
                best = std::max(best, in[ch * hw + i]);
            out[ch] = best;
        }
        return out;
    };
    Tensor out = apply(x.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0]); };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>& pv, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        const Tensor& in = *pv[0];
        const std::size_t c = in.extent(0), hw = in.extent(1) * in.extent(2);
        for (std::size_t ch = 0; ch < c; ++ch) {
            std::size_t arg = 0;
            double best = in[ch * hw];
            for (std::size_t i = 1; i < hw; ++i)
                if (in[ch * hw + i] > best) {
                    best = in[ch * hw + i];
                    arg = i;
                }
            (*pg[0])[ch * hw + arg] += gout[ch];
        }
    };
    return push(std::move(out), {x.id()}, fwd, bwd);
}

Var Tape::mul_spatial(Var x, Var a) {
    auto apply = [](const Tensor& in, const Tensor& att) {
        if (in.rank() != 3 || att.rank() != 3 || att.extent(0) != 1 ||
            att.extent(1) != in.extent(1) || att.extent(2) != in.extent(2))
            throw DimensionError("mul_spatial: expected [C,H,W] and [1,H,W]");
        Tensor out(in.shape());
        const std::size_t c = in.extent(0), hw = in.extent(1) * in.extent(2);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < hw; ++i)
                out[ch * hw + i] = in[ch * hw + i] * att[i];
        return out;
    };
    Tensor out = apply(x.value(), a.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) {
        return apply(*pv[0], *pv[1]);
    };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>& pv, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        const Tensor& in = *pv[0];
        const Tensor& att = *pv[1];
        const std::size_t c = in.extent(0), hw = in.extent(1) * in.extent(2);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < hw; ++i) {
                const double g = gout[ch * hw + i];
                if (pg[0]) (*pg[0])[ch * hw + i] += g * att[i];
                if (pg[1]) (*pg[1])[i] += g * in[ch * hw + i];
            }
    };
    return push(std::move(out), {x.id(), a.id()}, fwd, bwd);
}

Var Tape::mul_channel(Var x, Var g) {
    auto apply = [](const Tensor& in, const Tensor& gate) {
        if (in.rank() != 3 || gate.rank() != 1 || gate.extent(0) != in.extent(0))
            throw DimensionError("mul_channel: expected [C,H,W] and [C]");
        Tensor out(in.shape());
        const std::size_t c = in.extent(0), hw = in.extent(1) * in.extent(2);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < hw; ++i)
                out[ch * hw + i] = in[ch * hw + i] * gate[ch];
        return out;
    };
    Tensor out = apply(x.value(), g.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) {
        return apply(*pv[0], *pv[1]);
    };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>& pv, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        const Tensor& in = *pv[0];
        const Tensor& gate = *pv[1];
        const std::size_t c = in.extent(0), hw = in.extent(1) * in.extent(2);
        for (std::size_t ch = 0; ch < c; ++ch) {
            double gacc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) {
                const double g = gout[ch * hw + i];
                if (pg[0]) (*pg[0])[ch * hw + i] += g * gate[ch];
                gacc += g * in[ch * hw + i];
            }
            if (pg[1]) (*pg[1])[ch] += gacc;
        }
    };
    return push(std::move(out), {x.id(), g.id()}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// elementwise / scalar algebra
// ---------------------------------------------------------------------------

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() +
                             " vs " + b.shape_string());
}

} // namespace

Var Tape::add(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "add");
    auto apply = [](const Tensor& ta, const Tensor& tb) {
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += tb[i];
        return out;
    };
    Tensor out = apply(a.value(), b.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0], *pv[1]); };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>&, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        for (int p = 0; p < 2; ++p)
            if (pg[p])
                for (std::size_t i = 0; i < gout.size(); ++i) (*pg[p])[i] += gout[i];
    };
    return push(std::move(out), {a.id(), b.id()}, fwd, bwd);
}

Var Tape::sub(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "sub");
    auto apply = [](const Tensor& ta, const Tensor& tb) {
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= tb[i];
        return out;
    };
    Tensor out = apply(a.value(), b.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0], *pv[1]); };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>&, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        if (pg[0])
            for (std::size_t i = 0; i < gout.size(); ++i) (*pg[0])[i] += gout[i];
        if (pg[1])
            for (std::size_t i = 0; i < gout.size(); ++i) (*pg[1])[i] -= gout[i];
    };
    return push(std::move(out), {a.id(), b.id()}, fwd, bwd);
}

Var Tape::mul(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "mul");
    auto apply = [](const Tensor& ta, const Tensor& tb) {
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= tb[i];
        return out;
    };
    Tensor out = apply(a.value(), b.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0], *pv[1]); };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>& pv, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        if (pg[0])
            for (std::size_t i = 0; i < gout.size(); ++i)
                (*pg[0])[i] += gout[i] * (*pv[1])[i];
        if (pg[1])
            for (std::size_t i = 0; i < gout.size(); ++i)
                (*pg[1])[i] += gout[i] * (*pv[0])[i];
    };
    return push(std::move(out), {a.id(), b.id()}, fwd, bwd);
}

Var Tape::div(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "div");
    auto apply = [](const Tensor& ta, const Tensor& tb) {
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] /= tb[i];
        return out;
    };
    Tensor out = apply(a.value(), b.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0], *pv[1]); };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>& pv, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        const Tensor& ta = *pv[0];
        const Tensor& tb = *pv[1];
        if (pg[0])
            for (std::size_t i = 0; i < gout.size(); ++i)
                (*pg[0])[i] += gout[i] / tb[i];
        if (pg[1])
            for (std::size_t i = 0; i < gout.size(); ++i)
                (*pg[1])[i] -= gout[i] * ta[i] / (tb[i] * tb[i]);
    };
    return push(std::move(out), {a.id(), b.id()}, fwd, bwd);
}

Var Tape::scale(Var a, double s) {
    auto apply = [s](const Tensor& t) {
        Tensor out = t;
        for (double& v : out.values()) v *= s;
        return out;
    };
    Tensor out = apply(a.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0]); };
    auto bwd = [s](const Tensor& gout, const std::vector<const Tensor*>&, const Tensor&,
                   const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < gout.size(); ++i) (*pg[0])[i] += gout[i] * s;
    };
    return push(std::move(out), {a.id()}, fwd, bwd);
}

Var Tape::add_const(Var a, double c) {
    auto apply = [c](const Tensor& t) {
        Tensor out = t;
        for (double& v : out.values()) v += c;
        return out;
    };
    Tensor out = apply(a.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0]); };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>&, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < gout.size(); ++i) (*pg[0])[i] += gout[i];
    };
    return push(std::move(out), {a.id()}, fwd, bwd);
}

Var Tape::dot(Var a, Var b) {
    if (a.value().size() != b.value().size())
        throw DimensionError("dot: size mismatch");
    auto apply = [](const Tensor& ta, const Tensor& tb) {
        double acc = 0.0;
        for (std::size_t i = 0; i < ta.size(); ++i) acc += ta[i] * tb[i];
        return Tensor::scalar(acc);
    };
    Tensor out = apply(a.value(), b.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0], *pv[1]); };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>& pv, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        const double g = gout[0];
        if (pg[0])
            for (std::size_t i = 0; i < pv[1]->size(); ++i)
                (*pg[0])[i] += g * (*pv[1])[i];
        if (pg[1])
            for (std::size_t i = 0; i < pv[0]->size(); ++i)
                (*pg[1])[i] += g * (*pv[0])[i];
    };
    return push(std::move(out), {a.id(), b.id()}, fwd, bwd);
}

Var Tape::sqrt(Var a) {
    auto apply = [](const Tensor& t) {
        Tensor out = t;
        for (double& v : out.values()) v = std::sqrt(v);
        return out;
    };
    Tensor out = apply(a.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0]); };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>&, const Tensor& out,
                  const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < gout.size(); ++i)
            (*pg[0])[i] += gout[i] * 0.5 / out[i];
    };
    return push(std::move(out), {a.id()}, fwd, bwd);
}

Var Tape::log_clamped(Var a, double floor_value) {
    auto apply = [floor_value](const Tensor& t) {
        Tensor out = t;
        for (double& v : out.values()) v = std::log(std::max(v, floor_value));
        return out;
    };
    Tensor out = apply(a.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0]); };
    auto bwd = [floor_value](const Tensor& gout, const std::vector<const Tensor*>& pv,
                             const Tensor&, const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        const Tensor& in = *pv[0];
        for (std::size_t i = 0; i < gout.size(); ++i)
            if (in[i] > floor_value) (*pg[0])[i] += gout[i] / in[i];
    };
    return push(std::move(out), {a.id()}, fwd, bwd);
}

Var Tape::pick(Var a, std::size_t index) {
    if (index >= a.value().size()) throw DimensionError("pick: index out of range");
    auto apply = [index](const Tensor& t) { return Tensor::scalar(t[index]); };
    Tensor out = apply(a.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0]); };
    auto bwd = [index](const Tensor& gout, const std::vector<const Tensor*>&, const Tensor&,
                       const std::vector<Tensor*>& pg) {
        if (pg[0]) (*pg[0])[index] += gout[0];
    };
    return push(std::move(out), {a.id()}, fwd, bwd);
}

Var Tape::sum_all(Var a) {
    auto apply = [](const Tensor& t) {
        double acc = 0.0;
        for (double v : t.values()) acc += v;
        return Tensor::scalar(acc);
    };
    Tensor out = apply(a.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0]); };
    auto bwd = [](const Tensor& gout, const std::vector<const Tensor*>& pv, const Tensor&,
                  const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < pv[0]->size(); ++i) (*pg[0])[i] += gout[0];
    };
    return push(std::move(out), {a.id()}, fwd, bwd);
}

Var Tape::mean_all(Var a) {
    const double inv = 1.0 / static_cast<double>(a.value().size());
    auto apply = [inv](const Tensor& t) {
        double acc = 0.0;
        for (double v : t.values()) acc += v;
        return Tensor::scalar(acc * inv);
    };
    Tensor out = apply(a.value());
    auto fwd = [apply](const std::vector<const Tensor*>& pv) { return apply(*pv[0]); };
    auto bwd = [inv](const Tensor& gout, const std::vector<const Tensor*>& pv, const Tensor&,
                     const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        const double g = gout[0] * inv;
        for (std::size_t i = 0; i < pv[0]->size(); ++i) (*pg[0])[i] += g;
    };
    return push(std::move(out), {a.id()}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// reverse sweep & replay
// ---------------------------------------------------------------------------

Gradients Tape::grad(Var scalar_output) const {
    if (scalar_output.tape() != this)
        throw ConstraintError("grad: output belongs to a different tape");
    if (scalar_output.value().size() != 1)
        throw ConstraintError("grad: output must be scalar, got shape " +
                              scalar_output.value().shape_string());

    Gradients g;
    g.by_id_.resize(nodes_.size());
    g.present_.assign(nodes_.size(), false);

    auto ensure = [&](std::size_t id) -> Tensor& {
        if (!g.present_[id]) {
            g.by_id_[id] = Tensor(nodes_[id].value.shape(), 0.0);
            g.present_[id] = true;
        }
        return g.by_id_[id];
    };

    ensure(scalar_output.id())[0] = 1.0;

    for (std::size_t i = scalar_output.id() + 1; i-- > 0;) {
        const Node& n = nodes_[i];
        if (!g.present_[i] || !n.backward) continue;
        std::vector<const Tensor*> pv = parent_values(n);
        std::vector<Tensor*> pg(n.parents.size());
        for (std::size_t p = 0; p < n.parents.size(); ++p)
            pg[p] = &ensure(n.parents[p]);
        n.backward(g.by_id_[i], pv, n.value, pg);
    }
    return g;
}

bool Tape::replay_matches() const {
    for (const Node& n : nodes_) {
        if (!n.forward) continue;
        const Tensor redo = n.forward(parent_values(n));
        if (redo.shape() != n.value.shape()) return false;
        for (std::size_t i = 0; i < redo.size(); ++i)
            if (redo[i] != n.value[i]) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

double gradient_check(const TapeFn& f, const std::vector<Tensor>& point, double eps) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(point.size());
    for (const Tensor& t : point) leaves.push_back(tape.leaf(t));
    Var out = f(tape, leaves);
    if (out.value().size() != 1)
        throw ConstraintError("gradient_check: function must return a scalar");
    Gradients grads = tape.grad(out);

    auto eval = [&](const std::vector<Tensor>& at) {
        Tape t2;
        std::vector<Var> l2;
        l2.reserve(at.size());
        for (const Tensor& t : at) l2.push_back(t2.leaf(t));
        return f(t2, l2).value()[0];
    };

    double worst = 0.0;
    std::vector<Tensor> work = point;
    for (std::size_t ti = 0; ti < point.size(); ++ti) {
        const Tensor analytic = grads.wrt(leaves[ti]);
        for (std::size_t i = 0; i < point[ti].size(); ++i) {
            const double orig = work[ti][i];
            work[ti][i] = orig + eps;
            const double fp = eval(work);
            work[ti][i] = orig - eps;
            const double fm = eval(work);
            work[ti][i] = orig;
            const double fd = (fp - fm) / (2.0 * eps);
            const double err =
                std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

} // namespace veinmatch
