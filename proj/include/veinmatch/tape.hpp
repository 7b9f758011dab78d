#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "veinmatch/tensor.hpp"

namespace veinmatch {

class Tape;

// Handle to a tape node. Cheap to copy; valid as long as its tape lives.
class Var {
public:
    Var() = default;
    const Tensor& value() const;
    std::size_t id() const { return id_; }
    Tape* tape() const { return tape_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

// Result of a backward pass: one gradient tensor per reached node.
class Gradients {
public:
    // Gradient of the differentiated scalar w.r.t. v; zeros if v was never
    // reached by the reverse sweep.
    Tensor wrt(const Var& v) const;
    bool reached(const Var& v) const;

private:
    friend class Tape;
    std::vector<Tensor> by_id_;
    std::vector<bool> present_;
};

// Records every primitive application so a scalar output can be
// differentiated with respect to any leaf. Nodes are appended in evaluation
// order, which is already a topological order for the reverse sweep.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool trainable = true);

    // -- network primitives -------------------------------------------------

    // Cross-correlation, zero padding. input [Cin,H,W], kernels
    // [Cout,Cin,kH,kW], bias [Cout] -> [Cout,H',W'].
    Var conv2d(Var input, Var kernels, Var bias, std::size_t stride, std::size_t pad);

    // Max over k x k windows; gradient routes to the first argmax in
    // row-major order.
    Var maxpool2d(Var input, std::size_t k, std::size_t stride);

    // weight [m,n] * input [n] + bias [m].
    Var dense(Var input, Var weight, Var bias);

    Var relu(Var x);
    Var sigmoid(Var x);

    // Stable softmax over a rank-1 tensor.
    Var softmax(Var z);

    // Inverted dropout: training zeroes with probability rate and scales
    // survivors by 1/(1-rate); inference is the identity.
    Var dropout(Var x, double rate, std::uint64_t seed, bool training);

    // -- structural / attention helpers -------------------------------------

    Var reshape(Var x, std::vector<std::size_t> shape);
    Var concat_channels(Var a, Var b);        // [C1,H,W] + [C2,H,W] -> [C1+C2,H,W]
    Var channel_mean(Var x);                  // [C,H,W] -> [1,H,W]
    Var channel_max(Var x);                   // [C,H,W] -> [1,H,W]
    Var global_avg(Var x);                    // [C,H,W] -> [C]
    Var global_max(Var x);                    // [C,H,W] -> [C]
    Var mul_spatial(Var x, Var a);            // [C,H,W] * [1,H,W]
    Var mul_channel(Var x, Var g);            // [C,H,W] * [C]

    // -- elementwise / scalar algebra ----------------------------------------

    Var add(Var a, Var b);                    // same shape
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    Var scale(Var a, double s);
    Var add_const(Var a, double c);
    Var dot(Var a, Var b);                    // -> scalar
    Var sqrt(Var a);
    Var log_clamped(Var a, double floor_value);
    Var pick(Var a, std::size_t index);       // -> scalar
    Var sum_all(Var a);                       // -> scalar
    Var mean_all(Var a);                      // -> scalar

    // -- evaluation -----------------------------------------------------------

    // Reverse-mode derivatives of a scalar node w.r.t. every node that feeds
    // it. Throws ConstraintError if output is not a scalar.
    Gradients grad(Var scalar_output) const;

    // Re-runs every recorded forward and compares against the stored values
    // bit for bit.
    bool replay_matches() const;

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        std::vector<std::size_t> parents;
        // Recomputes value from parent values; null for leaves.
        std::function<Tensor(const std::vector<const Tensor*>&)> forward;
        // Accumulates into parent gradients given output gradient, parent
        // values and own value; null for leaves.
        std::function<void(const Tensor& gout, const std::vector<const Tensor*>& pv,
                           const Tensor& out, const std::vector<Tensor*>& pg)>
            backward;
    };

    Var push(Tensor value, std::vector<std::size_t> parents,
             std::function<Tensor(const std::vector<const Tensor*>&)> fwd,
             std::function<void(const Tensor&, const std::vector<const Tensor*>&,
                                const Tensor&, const std::vector<Tensor*>&)>
                 bwd);

    std::vector<const Tensor*> parent_values(const Node& n) const;

    std::vector<Node> nodes_;

    friend class Var;
};

// Max over all coordinates of |analytic - central difference| /
// max(1, |analytic|) for a scalar-valued tape function evaluated at `point`.
using TapeFn = std::function<Var(Tape&, const std::vector<Var>&)>;
double gradient_check(const TapeFn& f, const std::vector<Tensor>& point,
                      double eps = 1e-4);

} // namespace veinmatch
