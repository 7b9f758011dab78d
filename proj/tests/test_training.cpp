#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "veinmatch/rng.hpp"
#include "veinmatch/training.hpp"

using namespace veinmatch;

namespace {

std::vector<LabeledSample> grid_dataset(std::size_t ids, std::size_t imgs,
                                        std::size_t side = 8) {
    SynthSpec spec;
    spec.identity_count = ids;
    spec.images_per_session = imgs;
    spec.side = std::max<std::size_t>(side, 32);
    spec.identity_seed = 99;
    auto samples = synth_generate(spec);
    std::vector<LabeledSample> out;
    for (auto& s : samples) {
        if (s.session != 1) continue;
        s.image = crop_roi(s.image, s.image.width / 2, s.image.height / 2, side);
        out.push_back(std::move(s));
    }
    return out;
}

ModelSpec tiny_spec(std::size_t classes, std::size_t side = 8) {
    ModelSpec spec;
    spec.input_height = side;
    spec.input_width = side;
    spec.blocks = {{1, 3, 2, true, true}};
    spec.head.hidden = {8};
    spec.head.dropout = 0.2;
    spec.head.classes = classes;
    return spec;
}

} // namespace

TEST_SUITE("make_batches") {
    TEST_CASE("2 ids x 2 images with P=K=2 gives one exhaustive batch") {
        auto data = grid_dataset(2, 2);
        TrainConfig cfg;
        cfg.batch_p = 2;
        cfg.batch_k = 2;
        const auto batches = make_batches(data, cfg);
        REQUIRE(batches.size() == 1);
        CHECK(batches[0].inputs.size() == 4);
        std::map<std::string, int> counts;
        for (const auto& id : batches[0].identities) ++counts[id];
        CHECK(counts.size() == 2);
        for (const auto& [id, n] : counts) CHECK(n == 2);
    }

    TEST_CASE("10 ids x 6 images with P=K=2 gives 15 batches holding the invariant") {
        auto data = grid_dataset(10, 6);
        TrainConfig cfg;
        cfg.batch_p = 2;
        cfg.batch_k = 2;
        const auto batches = make_batches(data, cfg);
        CHECK(batches.size() == 15);
        for (const Batch& b : batches) {
            bool same = false, diff = false;
            for (std::size_t i = 0; i < b.identities.size(); ++i)
                for (std::size_t j = i + 1; j < b.identities.size(); ++j)
                    (b.identities[i] == b.identities[j] ? same : diff) = true;
            CHECK(same);
            CHECK(diff);
        }
    }

    TEST_CASE("each sample is used at most once per epoch") {
        auto data = grid_dataset(5, 5);
        TrainConfig cfg;
        cfg.batch_p = 2;
        cfg.batch_k = 2;
        const auto batches = make_batches(data, cfg);
        // count usage via label+pixel fingerprint
        std::multiset<std::string> used;
        for (const Batch& b : batches)
            for (std::size_t i = 0; i < b.inputs.size(); ++i) {
                std::string key = b.identities[i] + ":";
                for (std::size_t j = 0; j < 8; ++j)
                    key += std::to_string(b.inputs[i][j]) + ",";
                used.insert(key);
            }
        for (const auto& key : used) CHECK(used.count(key) == 1);
    }

    TEST_CASE("same seed gives identical batch composition") {
        auto data = grid_dataset(4, 4);
        TrainConfig cfg;
        cfg.batch_p = 2;
        cfg.batch_k = 2;
        cfg.seed = 31;
        const auto a = make_batches(data, cfg);
        const auto b = make_batches(data, cfg);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].identities == b[i].identities);
            CHECK(a[i].labels == b[i].labels);
        }
    }

    TEST_CASE("insufficient data is a data error") {
        auto data = grid_dataset(2, 2);
        TrainConfig cfg;
        cfg.batch_p = 3;
        cfg.batch_k = 2;
        CHECK_THROWS_AS(make_batches(data, cfg), DataError);
    }
}

TEST_SUITE("cross_entropy") {
    TEST_CASE("one-hot correct predictions give zero loss") {
        Tensor probs({2, 3}, {1, 0, 0, 0, 1, 0});
        CHECK(cross_entropy(probs, {0, 1}) == 0.0);
    }

    TEST_CASE("uniform over four classes gives ln 4") {
        Tensor probs({1, 4}, 0.25);
        CHECK(cross_entropy(probs, {2}) ==
              doctest::Approx(1.386294).epsilon(1e-6));
    }

    TEST_CASE("two-row worked example") {
        Tensor probs({2, 2}, {0.5, 0.5, 0.25, 0.75});
        CHECK(cross_entropy(probs, {0, 0}) ==
              doctest::Approx(1.039721).epsilon(1e-6));
    }

    TEST_CASE("labels out of range raise") {
        Tensor probs({1, 2}, 0.5);
        CHECK_THROWS_AS(cross_entropy(probs, {2}), ConstraintError);
    }

    TEST_CASE("non-normalized rows raise") {
        Tensor probs({1, 2}, {0.9, 0.2});
        CHECK_THROWS_AS(cross_entropy(probs, {0}), ConstraintError);
    }
}

TEST_SUITE("l2_penalty") {
    TEST_CASE("zero weights give zero penalty; 3-4-5 gives 5") {
        ModelParams p;
        p.tensors.emplace("head.out.weight", Tensor({1, 2}, {0.0, 0.0}));
        p.trainable["head.out.weight"] = true;
        CHECK(l2_penalty(p) == 0.0);
        p.tensors.at("head.out.weight") = Tensor({1, 2}, {3.0, 4.0});
        CHECK(l2_penalty(p) == 5.0);
    }

    TEST_CASE("scaling the weights scales the norm") {
        ModelParams p;
        p.tensors.emplace("head.out.weight", Tensor({2, 2}, {1.0, -2.0, 0.5, 3.0}));
        p.trainable["head.out.weight"] = true;
        const double base = l2_penalty(p);
        for (double& v : p.tensors.at("head.out.weight").values()) v *= -2.5;
        CHECK(l2_penalty(p) == doctest::Approx(2.5 * base).epsilon(1e-12));
    }
}

TEST_SUITE("mg_batch") {
    TEST_CASE("identical same-class plus orthogonal other gives 1") {
        const std::vector<std::vector<double>> e = {{1, 0}, {1, 0}, {0, 1}};
        CHECK(mg_batch(e, {"A", "A", "B"}) == 1.0);
    }

    TEST_CASE("three-pair hand enumeration gives -0.5") {
        const std::vector<std::vector<double>> e = {{1, 0}, {0, 1}, {1, 0}};
        CHECK(mg_batch(e, {"A", "A", "B"}) == -0.5);
    }

    TEST_CASE("all-identical embeddings give 0") {
        const std::vector<std::vector<double>> e = {{1, 1}, {1, 1}, {1, 1}, {1, 1}};
        CHECK(mg_batch(e, {"A", "A", "B", "B"}) == 0.0);
    }

    TEST_CASE("missing a pair class is a constraint error") {
        const std::vector<std::vector<double>> e = {{1, 0}, {0, 1}};
        CHECK_THROWS_AS(mg_batch(e, {"A", "A"}), ConstraintError);
        CHECK_THROWS_AS(mg_batch(e, {"A", "B"}), ConstraintError);
    }

    TEST_CASE("zero-norm embeddings are degenerate") {
        const std::vector<std::vector<double>> e = {{0, 0}, {0, 1}, {1, 0}};
        CHECK_THROWS_AS(mg_batch(e, {"A", "A", "B"}), DegenerateEmbeddingError);
    }

    TEST_CASE("invariant to relabeling and positive rescaling") {
        Rng rng(71);
        std::vector<std::vector<double>> e;
        for (int i = 0; i < 6; ++i) {
            std::vector<double> v(4);
            for (double& x : v) x = rng.uniform(-1.0, 1.0) + 0.1;
            e.push_back(v);
        }
        const std::vector<std::string> ids = {"x", "x", "y", "y", "z", "z"};
        const std::vector<std::string> relabeled = {"p", "p", "q", "q", "r", "r"};
        const double base = mg_batch(e, ids);
        CHECK(mg_batch(e, relabeled) == base);
        for (double& x : e[2]) x *= 17.0;
        CHECK(mg_batch(e, ids) == doctest::Approx(base).epsilon(1e-12));
        CHECK(base <= 2.0);
        CHECK(base >= -2.0);
    }
}

TEST_SUITE("multitask_loss") {
    TEST_CASE("theta 1 equals cross_entropy plus lambda l2 bit for bit") {
        Rng rng(81);
        for (int trial = 0; trial < 50; ++trial) {
            const std::size_t n = 2 + rng.uniform_index(4);
            const std::size_t c = 2 + rng.uniform_index(4);
            Tensor logits({n, c});
            for (double& v : logits.values()) v = rng.uniform(-3.0, 3.0);
            std::vector<std::size_t> labels(n);
            for (auto& l : labels) l = rng.uniform_index(c);

            ModelParams params;
            Tensor w({c, 4});
            for (double& v : w.values()) v = rng.uniform(-1.0, 1.0);
            params.tensors.emplace("head.out.weight", w);
            params.trainable["head.out.weight"] = true;

            TrainConfig cfg;
            cfg.theta = 1.0;
            cfg.lambda = 0.001;

            // reference: softmax rows then the two components
            Tensor probs({n, c});
            for (std::size_t i = 0; i < n; ++i) {
                double mx = logits.at2(i, 0);
                for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at2(i, j));
                double sum = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    probs.at2(i, j) = std::exp(logits.at2(i, j) - mx);
                    sum += probs.at2(i, j);
                }
                for (std::size_t j = 0; j < c; ++j) probs.at2(i, j) /= sum;
            }
            const double expected =
                cross_entropy(probs, labels) + cfg.lambda * l2_penalty(params);
            const double got = multitask_loss(logits, labels, {}, {}, params, cfg);
            CHECK(got == expected); // bitwise
        }
    }

    TEST_CASE("worked arithmetic at theta 0.3") {
        // CE = 1 via p_correct = 1/e; MG = 0.5; lambda*||w|| = 0.01
        const double b = std::log(std::exp(1.0) - 1.0);
        Tensor logits({3, 2}, {0, b, 0, b, 0, b});
        const std::vector<std::size_t> labels = {0, 0, 0};
        const std::vector<std::vector<double>> embeds = {
            {1, 0}, {1, 0}, {0.5, std::sqrt(3.0) / 2.0}};
        const std::vector<std::string> ids = {"A", "A", "B"};
        ModelParams params;
        params.tensors.emplace("head.out.weight", Tensor({1, 1}, {1.0}));
        params.trainable["head.out.weight"] = true;
        TrainConfig cfg;
        cfg.theta = 0.3;
        cfg.lambda = 0.01;
        CHECK(multitask_loss(logits, labels, embeds, ids, params, cfg) ==
              doctest::Approx(0.66).epsilon(1e-9));
    }

    TEST_CASE("theta 0 with perfect clusters and zero weights gives 0") {
        Tensor logits({3, 2}, {5, -5, 5, -5, -5, 5}); // CE ignored at theta 0
        const std::vector<std::size_t> labels = {0, 0, 1};
        const std::vector<std::vector<double>> embeds = {{1, 0}, {1, 0}, {0, 1}};
        const std::vector<std::string> ids = {"A", "A", "B"};
        ModelParams params;
        params.tensors.emplace("head.out.weight", Tensor({2, 2}, 0.0));
        params.trainable["head.out.weight"] = true;
        TrainConfig cfg;
        cfg.theta = 0.0;
        cfg.lambda = 0.5;
        // 0*CE + 1*(1-1) + 0.5*0 = 0
        CHECK(multitask_loss(logits, labels, embeds, ids, params, cfg) == 0.0);
    }

    TEST_CASE("tape loss value matches the eager loss") {
        Rng rng(82);
        for (double theta : {0.0, 0.3, 1.0}) {
            const std::size_t n = 4, c = 3, d = 5;
            Tensor logits({n, c});
            for (double& v : logits.values()) v = rng.uniform(-2.0, 2.0);
            std::vector<std::vector<double>> embeds(n, std::vector<double>(d));
            for (auto& e : embeds)
                for (double& v : e) v = rng.uniform(0.1, 1.0);
            const std::vector<std::size_t> labels = {0, 1, 2, 0};
            const std::vector<std::string> ids = {"a", "a", "b", "b"};
            ModelParams params;
            Tensor w({c, d});
            for (double& v : w.values()) v = rng.uniform(-1.0, 1.0);
            params.tensors.emplace("head.out.weight", w);
            params.trainable["head.out.weight"] = true;
            TrainConfig cfg;
            cfg.theta = theta;
            cfg.lambda = 0.01;

            const double eager = multitask_loss(logits, labels, embeds, ids, params, cfg);

            Tape t;
            std::vector<Var> logit_vars, embed_vars;
            for (std::size_t i = 0; i < n; ++i) {
                Tensor row({c});
                for (std::size_t j = 0; j < c; ++j) row[j] = logits.at2(i, j);
                logit_vars.push_back(t.leaf(row));
                embed_vars.push_back(t.leaf(Tensor({d}, embeds[i])));
            }
            std::map<std::string, Var> leaves{{"head.out.weight", t.leaf(w)}};
            const double taped = multitask_loss_tape(t, logit_vars, labels, embed_vars,
                                                     ids, leaves, params, cfg)
                                     .value()[0];
            CHECK(taped == doctest::Approx(eager).epsilon(1e-12));
        }
    }
}

TEST_SUITE("adam") {
    TEST_CASE("zero gradients leave parameters unchanged") {
        ModelParams p;
        p.tensors.emplace("w", Tensor({3}, {1.0, -2.0, 0.5}));
        p.trainable["w"] = true;
        const Tensor before = p.tensors.at("w");
        AdamState st;
        adam_step(p, {{"w", Tensor({3}, 0.0)}}, st, 0.01);
        CHECK(p.tensors.at("w").values() == before.values());
    }

    TEST_CASE("first step with unit gradient moves by about -lr") {
        ModelParams p;
        p.tensors.emplace("w", Tensor::scalar(0.0));
        p.trainable["w"] = true;
        AdamState st;
        adam_step(p, {{"w", Tensor::scalar(1.0)}}, st, 0.1);
        CHECK(p.tensors.at("w")[0] ==
              doctest::Approx(-0.1 * (1.0 / (1.0 + 1e-8))).epsilon(1e-12));
    }

    TEST_CASE("frozen groups stay untouched") {
        ModelParams p;
        p.tensors.emplace("w", Tensor::scalar(1.0));
        p.tensors.emplace("frozen", Tensor::scalar(2.0));
        p.trainable["w"] = true;
        p.trainable["frozen"] = false;
        AdamState st;
        adam_step(p, {{"w", Tensor::scalar(0.5)}}, st, 0.1);
        CHECK(p.tensors.at("frozen")[0] == 2.0);
        CHECK(p.tensors.at("w")[0] != 1.0);
    }

    TEST_CASE("missing gradient for a trainable group raises") {
        ModelParams p;
        p.tensors.emplace("w", Tensor::scalar(1.0));
        p.trainable["w"] = true;
        AdamState st;
        CHECK_THROWS_AS(adam_step(p, {}, st, 0.1), ConstraintError);
    }
}

TEST_SUITE("train") {
    TEST_CASE("zero epochs return the initial parameters and empty traces") {
        auto data = grid_dataset(3, 3);
        TrainConfig cfg;
        cfg.epochs = 0;
        cfg.batch_p = 2;
        cfg.batch_k = 2;
        const ModelSpec spec = tiny_spec(3);
        auto [params, report] = train(data, {}, spec, cfg);
        CHECK(report.loss.empty());
        CHECK(report.stop_epoch == 0);
        CHECK(checkpoint_bytes(params.tensors) ==
              checkpoint_bytes(build_model(spec, cfg.seed).tensors));
    }

    TEST_CASE("two runs with the same config are bit-identical") {
        auto data = grid_dataset(3, 4);
        TrainConfig cfg;
        cfg.epochs = 2;
        cfg.batch_p = 2;
        cfg.batch_k = 2;
        cfg.theta = 0.3;
        cfg.lr = 1e-3;
        const ModelSpec spec = tiny_spec(3);
        auto [p1, r1] = train(data, {}, spec, cfg);
        auto [p2, r2] = train(data, {}, spec, cfg);
        CHECK(checkpoint_bytes(p1.tensors) == checkpoint_bytes(p2.tensors));
        CHECK(r1.loss == r2.loss);
    }

    TEST_CASE("a full freeze keeps the loss constant across epochs") {
        auto data = grid_dataset(3, 4);
        TrainConfig cfg;
        cfg.epochs = 3;
        cfg.batch_p = 2;
        cfg.batch_k = 2;
        cfg.theta = 1.0;
        cfg.freeze = {"*"};
        const ModelSpec spec = tiny_spec(3);
        auto [params, report] = train(data, {}, spec, cfg);
        REQUIRE(report.loss.size() == 3);
        CHECK(report.loss[1] == report.loss[0]);
        CHECK(report.loss[2] == report.loss[0]);
        CHECK(checkpoint_bytes(params.tensors) ==
              checkpoint_bytes(build_model(spec, cfg.seed).tensors));
    }

    TEST_CASE("validation identities must come from the training set") {
        auto data = grid_dataset(3, 3);
        auto val = grid_dataset(3, 3);
        val[0].identity = "stranger";
        TrainConfig cfg;
        cfg.batch_p = 2;
        cfg.batch_k = 2;
        CHECK_THROWS_AS(train(data, val, tiny_spec(3), cfg), DataError);
    }

    TEST_CASE("early stopping returns the best-validation parameters") {
        SynthSpec synth;
        synth.identity_count = 3;
        synth.images_per_session = 6;
        synth.side = 32;
        auto all = synth_generate(synth);
        std::vector<LabeledSample> session1;
        for (auto& s : all)
            if (s.session == 1) session1.push_back(s);
        std::vector<LabeledSample> train_set, val_set;
        for (const auto& s : session1)
            (s.index < 4 ? train_set : val_set).push_back(s);

        ModelSpec spec = tiny_spec(3, 32);
        TrainConfig cfg;
        cfg.epochs = 6;
        cfg.patience = 2;
        cfg.batch_p = 2;
        cfg.batch_k = 2;
        cfg.theta = 1.0;
        cfg.lr = 2e-3;
        auto [params, report] = train(train_set, val_set, spec, cfg);

        const auto label_map = identity_index_map(train_set);
        const double returned_acc = accuracy(params, val_set, label_map);
        double best_seen = 0.0;
        for (double v : report.val_accuracy) best_seen = std::max(best_seen, v);
        CHECK(returned_acc == doctest::Approx(best_seen).epsilon(1e-12));
    }
}

TEST_SUITE("train config") {
    TEST_CASE("JSON round-trip") {
        TrainConfig cfg;
        cfg.theta = 0.5;
        cfg.freeze = {"block1*"};
        const TrainConfig back = TrainConfig::from_json(cfg.to_json());
        CHECK(back.theta == cfg.theta);
        CHECK(back.freeze == cfg.freeze);
        CHECK(back.lr == cfg.lr);
    }

    TEST_CASE("invalid configs are rejected") {
        TrainConfig cfg;
        cfg.theta = 1.5;
        CHECK_THROWS_AS(cfg.validate(), ParamError);
        cfg = TrainConfig{};
        cfg.batch_k = 1;
        CHECK_THROWS_AS(cfg.validate(), ParamError);
        cfg = TrainConfig{};
        cfg.lr = 0.0;
        CHECK_THROWS_AS(cfg.validate(), ParamError);
    }
}
