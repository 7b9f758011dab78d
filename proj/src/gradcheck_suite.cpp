#include "veinmatch/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>

#include "veinmatch/model.hpp"
#include "veinmatch/rng.hpp"
#include "veinmatch/tape.hpp"
#include "veinmatch/training.hpp"

namespace veinmatch {

namespace {

// Magnitudes in [lo, hi] with random sign: keeps values away from the RELU
// kink and keeps norms bounded away from zero.
Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double lo = 0.1,
                     double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) {
        const double mag = rng.uniform(lo, hi);
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    return t;
}

Tensor positive_tensor(Rng& rng, std::vector<std::size_t> shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

using CheckFn = std::function<double(Rng&, double)>; // one trial -> max error

double check_conv2d(Rng& rng, double eps) {
    const std::size_t k = 1 + rng.uniform_index(3);
    const std::size_t cin = 1 + rng.uniform_index(2);
    const std::size_t cout = 1 + rng.uniform_index(2);
    const std::size_t h = k + rng.uniform_index(4);
    const std::size_t w = k + rng.uniform_index(4);
    const std::size_t stride = 1 + rng.uniform_index(2);
    const std::size_t pad = rng.uniform_index(2);
    std::vector<Tensor> point = {random_tensor(rng, {cin, h, w}),
                                 random_tensor(rng, {cout, cin, k, k}),
                                 random_tensor(rng, {cout})};
    return gradient_check(
        [stride, pad](Tape& t, const std::vector<Var>& leaves) {
            return t.mean_all(t.conv2d(leaves[0], leaves[1], leaves[2], stride, pad));
        },
        point, eps);
}

double check_maxpool(Rng& rng, double eps) {
    const std::size_t h = 2 + rng.uniform_index(4);
    const std::size_t w = 2 + rng.uniform_index(4);
    const std::size_t k = 2 + rng.uniform_index(std::min(h, w) - 1);
    const std::size_t stride = 1 + rng.uniform_index(2);
    std::vector<Tensor> point = {random_tensor(rng, {2, h, w})};
    return gradient_check(
        [k, stride](Tape& t, const std::vector<Var>& leaves) {
            return t.sum_all(t.maxpool2d(leaves[0], k, stride));
        },
        point, eps);
}

double check_dense(Rng& rng, double eps) {
    const std::size_t m = 1 + rng.uniform_index(5);
    const std::size_t n = 1 + rng.uniform_index(5);
    std::vector<Tensor> point = {random_tensor(rng, {n}), random_tensor(rng, {m, n}),
                                 random_tensor(rng, {m})};
    return gradient_check(
        [](Tape& t, const std::vector<Var>& leaves) {
            return t.mean_all(t.dense(leaves[0], leaves[1], leaves[2]));
        },
        point, eps);
}

double check_relu(Rng& rng, double eps) {
    std::vector<Tensor> point = {random_tensor(rng, {6}, 0.05, 1.0)};
    return gradient_check(
        [](Tape& t, const std::vector<Var>& leaves) {
            return t.sum_all(t.relu(leaves[0]));
        },
        point, eps);
}

double check_sigmoid(Rng& rng, double eps) {
    std::vector<Tensor> point = {random_tensor(rng, {6}, 0.0, 3.0)};
    return gradient_check(
        [](Tape& t, const std::vector<Var>& leaves) {
            return t.sum_all(t.sigmoid(leaves[0]));
        },
        point, eps);
}

double check_softmax(Rng& rng, double eps) {
    const std::size_t c = 2 + rng.uniform_index(5);
    std::vector<Tensor> point = {random_tensor(rng, {c}, 0.0, 2.0),
                                 random_tensor(rng, {c}, 0.1, 1.0)};
    return gradient_check(
        [](Tape& t, const std::vector<Var>& leaves) {
            return t.dot(t.softmax(leaves[0]), leaves[1]);
        },
        point, eps);
}

double check_dropout(Rng& rng, double eps) {
    const std::uint64_t mask_seed = rng.next_u64();
    std::vector<Tensor> point = {random_tensor(rng, {8})};
    return gradient_check(
        [mask_seed](Tape& t, const std::vector<Var>& leaves) {
            return t.sum_all(t.dropout(leaves[0], 0.5, mask_seed, true));
        },
        point, eps);
}

double check_log(Rng& rng, double eps) {
    std::vector<Tensor> point = {positive_tensor(rng, {6}, 0.1, 2.0)};
    return gradient_check(
        [](Tape& t, const std::vector<Var>& leaves) {
            return t.sum_all(t.log_clamped(leaves[0], 1e-12));
        },
        point, eps);
}

double check_cosine(Rng& rng, double eps) {
    const std::size_t d = 2 + rng.uniform_index(6);
    std::vector<Tensor> point = {random_tensor(rng, {d}, 0.2, 1.0),
                                 random_tensor(rng, {d}, 0.2, 1.0)};
    return gradient_check(
        [](Tape& t, const std::vector<Var>& leaves) {
            Var num = t.dot(leaves[0], leaves[1]);
            Var den = t.sqrt(
                t.mul(t.dot(leaves[0], leaves[0]), t.dot(leaves[1], leaves[1])));
            return t.div(num, den);
        },
        point, eps);
}

double check_conv_dense_relu(Rng& rng, double eps) {
    const std::size_t h = 4 + rng.uniform_index(3);
    const std::size_t w = 4 + rng.uniform_index(3);
    const std::size_t cout = 2;
    const std::size_t flat = cout * h * w;
    std::vector<Tensor> point = {
        random_tensor(rng, {1, h, w}),
        random_tensor(rng, {cout, 1, 3, 3}),
        positive_tensor(rng, {cout}, 0.1, 0.4),
        random_tensor(rng, {3, flat}),
        random_tensor(rng, {3}),
    };
    return gradient_check(
        [flat](Tape& t, const std::vector<Var>& leaves) {
            Var c = t.conv2d(leaves[0], leaves[1], leaves[2], 1, 1);
            Var r = t.relu(t.reshape(c, {flat}));
            return t.mean_all(t.dense(r, leaves[3], leaves[4]));
        },
        point, eps);
}

double check_spatial_attention(Rng& rng, double eps) {
    std::vector<Tensor> point = {random_tensor(rng, {2, 8, 8}),
                                 random_tensor(rng, {1, 2, 7, 7}, 0.05, 0.3),
                                 positive_tensor(rng, {1}, 0.05, 0.2)};
    return gradient_check(
        [](Tape& t, const std::vector<Var>& leaves) {
            return t.mean_all(spatial_attention_op(t, leaves[0], leaves[1], leaves[2]));
        },
        point, eps);
}

double check_channel_attention(Rng& rng, double eps) {
    const std::size_t c = 4;
    const std::size_t red = 2;
    std::vector<Tensor> point = {random_tensor(rng, {c, 5, 5}),
                                 random_tensor(rng, {red, c}, 0.1, 0.5),
                                 positive_tensor(rng, {red}, 0.1, 0.4),
                                 random_tensor(rng, {c, red}, 0.1, 0.5),
                                 positive_tensor(rng, {c}, 0.1, 0.4)};
    return gradient_check(
        [](Tape& t, const std::vector<Var>& leaves) {
            return t.mean_all(channel_attention_op(t, leaves[0], leaves[1], leaves[2],
                                                   leaves[3], leaves[4]));
        },
        point, eps);
}

double check_multitask(Rng& rng, double eps, double theta) {
    const std::size_t n = 4, c = 3, d = 5;
    TrainConfig cfg;
    cfg.theta = theta;
    cfg.lambda = 0.01;

    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = rng.uniform_index(c);
    const std::vector<std::string> ids = {"a", "a", "b", "b"};

    std::vector<Tensor> point;
    for (std::size_t i = 0; i < n; ++i)
        point.push_back(random_tensor(rng, {c}, 0.0, 2.0));
    for (std::size_t i = 0; i < n; ++i)
        point.push_back(random_tensor(rng, {d}, 0.2, 1.0));
    point.push_back(random_tensor(rng, {c, d}, 0.1, 0.8)); // stands in for head.out.weight

    return gradient_check(
        [&, theta](Tape& t, const std::vector<Var>& leaves) {
            std::vector<Var> logits(leaves.begin(), leaves.begin() + n);
            std::vector<Var> embeds(leaves.begin() + n, leaves.begin() + 2 * n);
            std::map<std::string, Var> param_leaves{
                {"head.out.weight", leaves[2 * n]}};
            ModelParams stub;
            stub.trainable["head.out.weight"] = true;
            stub.tensors.emplace("head.out.weight", leaves[2 * n].value());
            return multitask_loss_tape(t, logits, labels, embeds, ids, param_leaves,
                                       stub, cfg);
        },
        point, eps);
}

} // namespace

std::vector<GradCheckResult> run_gradcheck_suite(std::size_t trials, std::uint64_t seed,
                                                 double eps) {
    struct Check {
        const char* name;
        CheckFn fn;
    };
    const std::vector<Check> checks = {
        {"conv2d", check_conv2d},
        {"maxpool2d", check_maxpool},
        {"dense", check_dense},
        {"relu", check_relu},
        {"sigmoid", check_sigmoid},
        {"softmax", check_softmax},
        {"dropout", check_dropout},
        {"log_clamped", check_log},
        {"cosine", check_cosine},
        {"conv_dense_relu", check_conv_dense_relu},
        {"spatial_attention", check_spatial_attention},
        {"channel_attention", check_channel_attention},
        {"multitask_theta_0.0", [](Rng& r, double e) { return check_multitask(r, e, 0.0); }},
        {"multitask_theta_0.3", [](Rng& r, double e) { return check_multitask(r, e, 0.3); }},
        {"multitask_theta_1.0", [](Rng& r, double e) { return check_multitask(r, e, 1.0); }},
    };

    std::vector<GradCheckResult> results;
    for (const Check& check : checks) {
        GradCheckResult r;
        r.name = check.name;
        Rng rng(mix_seed(seed, check.name));
        for (std::size_t t = 0; t < trials; ++t)
            r.max_error = std::max(r.max_error, check.fn(rng, eps));
        results.push_back(std::move(r));
    }
    return results;
}

double gradcheck_suite_max(const std::vector<GradCheckResult>& results) {
    double worst = 0.0;
    for (const GradCheckResult& r : results) worst = std::max(worst, r.max_error);
    return worst;
}

} // namespace veinmatch
