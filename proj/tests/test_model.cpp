#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "veinmatch/model.hpp"
#include "veinmatch/rng.hpp"
#include "veinmatch/training.hpp"

using namespace veinmatch;

namespace {

// Small spec that keeps forward passes cheap.
ModelSpec tiny_spec(std::size_t side = 8, std::size_t classes = 2) {
    ModelSpec spec;
    spec.input_height = side;
    spec.input_width = side;
    spec.blocks = {{1, 3, 2, true, true}};
    spec.head.hidden = {4};
    spec.head.dropout = 0.3;
    spec.head.classes = classes;
    return spec;
}

Tensor random_input(Rng& rng, const ModelSpec& spec) {
    Tensor x({spec.input_channels, spec.input_height, spec.input_width});
    for (double& v : x.values()) v = rng.uniform(0.05, 1.0);
    return x;
}

} // namespace

TEST_SUITE("build_model") {
    TEST_CASE("same spec and seed give identical parameters") {
        const ModelSpec spec = tiny_spec();
        const ModelParams a = build_model(spec, 7);
        const ModelParams b = build_model(spec, 7);
        CHECK(checkpoint_bytes(a.tensors) == checkpoint_bytes(b.tensors));
        const ModelParams c = build_model(spec, 8);
        CHECK(checkpoint_bytes(a.tensors) != checkpoint_bytes(c.tensors));
    }

    TEST_CASE("biases start at zero") {
        const ModelParams p = build_model(tiny_spec(), 3);
        for (const auto& [name, t] : p.tensors) {
            if (name.size() >= 5 && name.substr(name.size() - 5) == ".bias")
                for (double v : t.values()) CHECK(v == 0.0);
        }
    }

    TEST_CASE("initial weights respect the fan-in bound") {
        const ModelSpec spec = ModelSpec::desk_default(10, 32);
        const ModelParams p = build_model(spec, 11);
        auto bound_for = [](const Tensor& t, const std::string& name) {
            std::size_t fan_in = 0;
            if (t.rank() == 4)
                fan_in = t.extent(1) * t.extent(2) * t.extent(3);
            else if (t.rank() == 2)
                fan_in = t.extent(1);
            else
                return 0.0;
            (void)name;
            return std::sqrt(6.0 / static_cast<double>(fan_in));
        };
        for (const auto& [name, t] : p.tensors) {
            const double bound = bound_for(t, name);
            if (bound == 0.0) continue;
            for (double v : t.values()) CHECK(std::abs(v) <= bound);
        }
    }

    TEST_CASE("invalid specs are rejected") {
        ModelSpec spec = tiny_spec();
        spec.head.classes = 1;
        CHECK_THROWS_AS(build_model(spec, 1), SpecError);
        spec = tiny_spec();
        spec.blocks[0].channels = 0;
        CHECK_THROWS_AS(build_model(spec, 1), SpecError);
        spec = tiny_spec();
        spec.embed_tap = "block9.out";
        CHECK_THROWS_AS(build_model(spec, 1), SpecError);
    }
}

TEST_SUITE("spatial_attention") {
    TEST_CASE("zero conv weights halve the input") {
        Tape t;
        Rng rng(21);
        Tensor x({3, 9, 9});
        for (double& v : x.values()) v = rng.uniform(-1.0, 1.0);
        Var out = spatial_attention_op(t, t.leaf(x), t.leaf(Tensor({1, 2, 7, 7}, 0.0)),
                                       t.leaf(Tensor({1}, 0.0)));
        const Tensor o = out.value();
        for (std::size_t i = 0; i < x.size(); ++i)
            CHECK(o[i] == doctest::Approx(x[i] / 2.0).epsilon(1e-15));
    }

    TEST_CASE("bias-only attention is spatially uniform") {
        Tape t;
        Rng rng(22);
        Tensor x({2, 8, 8});
        for (double& v : x.values()) v = rng.uniform(0.1, 1.0);
        Var out = spatial_attention_op(t, t.leaf(x), t.leaf(Tensor({1, 2, 7, 7}, 0.0)),
                                       t.leaf(Tensor({1}, {0.8})));
        const double gate = 1.0 / (1.0 + std::exp(-0.8));
        const Tensor o = out.value();
        for (std::size_t i = 0; i < x.size(); ++i)
            CHECK(o[i] == doctest::Approx(x[i] * gate).epsilon(1e-12));
    }

    TEST_CASE("shape preserved for any input size >= kernel support") {
        Tape t;
        Tensor x({2, 11, 7}, 0.5);
        Rng rng(23);
        Tensor w({1, 2, 7, 7});
        for (double& v : w.values()) v = rng.uniform(-0.2, 0.2);
        Var out = spatial_attention_op(t, t.leaf(x), t.leaf(w), t.leaf(Tensor({1}, 0.0)));
        CHECK(out.value().shape() == x.shape());
    }
}

TEST_SUITE("channel_attention") {
    TEST_CASE("identical channels get identical gates") {
        Tape t;
        Rng rng(31);
        Tensor x({4, 5, 5});
        for (std::size_t i = 0; i < 25; ++i) {
            const double v = rng.uniform(0.0, 1.0);
            for (std::size_t c = 0; c < 4; ++c) x[c * 25 + i] = v;
        }
        Tensor w1({2, 4}), w2({4, 2});
        for (double& v : w1.values()) v = rng.uniform(-0.5, 0.5);
        for (double& v : w2.values()) v = rng.uniform(-0.5, 0.5);
        Var out = channel_attention_op(t, t.leaf(x), t.leaf(w1),
                                       t.leaf(Tensor({2}, 0.0)), t.leaf(w2),
                                       t.leaf(Tensor({4}, 0.0)));
        const Tensor o = out.value();
        // all channels equal in, so gates equal: outputs stay channel-identical
        for (std::size_t i = 0; i < 25; ++i)
            for (std::size_t c = 1; c < 4; ++c)
                CHECK(o[c * 25 + i] == doctest::Approx(o[i]).epsilon(1e-12));
    }

    TEST_CASE("zero MLP gives 0.5 gates") {
        Tape t;
        Tensor x({2, 3, 3}, 0.8);
        Var out = channel_attention_op(t, t.leaf(x), t.leaf(Tensor({1, 2}, 0.0)),
                                       t.leaf(Tensor({1}, 0.0)),
                                       t.leaf(Tensor({2, 1}, 0.0)),
                                       t.leaf(Tensor({2}, 0.0)));
        for (double v : out.value().values())
            CHECK(v == doctest::Approx(0.4).epsilon(1e-15));
    }

    TEST_CASE("a -10 pre-sigmoid gate suppresses its channel") {
        Tape t;
        Tensor x({2, 3, 3}, 1.0);
        // fc2 bias of -10 on channel 0, +10 on channel 1 hmm keep 0
        Tensor b2({2}, {-10.0, 0.0});
        Var out = channel_attention_op(t, t.leaf(x), t.leaf(Tensor({1, 2}, 0.0)),
                                       t.leaf(Tensor({1}, 0.0)),
                                       t.leaf(Tensor({2, 1}, 0.0)), t.leaf(b2));
        const Tensor o = out.value();
        double n0 = 0.0, nin = 0.0;
        for (std::size_t i = 0; i < 9; ++i) {
            n0 += o[i] * o[i];
            nin += x[i] * x[i];
        }
        CHECK(std::sqrt(n0) / std::sqrt(nin) < 1e-3);
        // gates stay strictly inside (0,1)
        for (std::size_t i = 0; i < 18; ++i) {
            CHECK(o[i] > 0.0);
            CHECK(o[i] < 1.0);
        }
    }
}

TEST_SUITE("forward") {
    TEST_CASE("logit length equals the class count") {
        const ModelSpec spec = tiny_spec(8, 3);
        const ModelParams p = build_model(spec, 5);
        Rng rng(41);
        const Tensor x = random_input(rng, spec);
        CHECK(forward_logits(p, x, 0, false).size() == 3);
    }

    TEST_CASE("inference is deterministic") {
        const ModelSpec spec = tiny_spec();
        const ModelParams p = build_model(spec, 5);
        Rng rng(42);
        const Tensor x = random_input(rng, spec);
        const Tensor a = forward_logits(p, x, 0, false);
        const Tensor b = forward_logits(p, x, 123, false); // seed ignored off-training
        CHECK(a.values() == b.values());
    }

    TEST_CASE("doubling input intensities changes the logits") {
        const ModelSpec spec = tiny_spec();
        const ModelParams p = build_model(spec, 6);
        Rng rng(43);
        Tensor x = random_input(rng, spec);
        Tensor x2 = x;
        for (double& v : x2.values()) v *= 2.0;
        const Tensor a = forward_logits(p, x, 0, false);
        const Tensor b = forward_logits(p, x2, 0, false);
        double delta = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) delta += std::abs(a[i] - b[i]);
        CHECK(delta > 0.0);
    }

    TEST_CASE("wrong input shape is a dimension error") {
        const ModelSpec spec = tiny_spec();
        const ModelParams p = build_model(spec, 5);
        CHECK_THROWS_AS(forward_logits(p, Tensor({1, 4, 4}, 0.5), 0, false),
                        DimensionError);
    }
}

TEST_SUITE("embedding") {
    TEST_CASE("dimension follows the spec shape arithmetic") {
        // Desk default at 64: three pooling halvings, 64 channels at 8x8.
        CHECK(ModelSpec::desk_default(10, 64).embed_dim() == 64 * 8 * 8);
        const ModelSpec spec = tiny_spec(8, 2); // one pool: 2 x 4 x 4
        CHECK(spec.embed_dim() == 32);
        const ModelParams p = build_model(spec, 5);
        Rng rng(51);
        CHECK(extract_embedding(p, random_input(rng, spec)).size() == 32);
    }

    TEST_CASE("identical inputs give identical embeddings") {
        const ModelSpec spec = tiny_spec();
        const ModelParams p = build_model(spec, 9);
        Rng rng(52);
        const Tensor x = random_input(rng, spec);
        CHECK(extract_embedding(p, x) == extract_embedding(p, x));
    }

    TEST_CASE("all-zero input with zero biases gives a zero embedding") {
        const ModelSpec spec = tiny_spec();
        const ModelParams p = build_model(spec, 9); // biases zero at init
        const Tensor x({1, 8, 8}, 0.0);
        const auto emb = extract_embedding(p, x);
        for (double v : emb) CHECK(v == 0.0);
    }
}

TEST_SUITE("freeze") {
    TEST_CASE("empty mask leaves everything trainable") {
        ModelParams p = build_model(tiny_spec(), 1);
        apply_freeze(p, {});
        for (const auto& [name, flag] : p.trainable) CHECK(flag);
    }

    TEST_CASE("unknown group names are mask errors") {
        ModelParams p = build_model(tiny_spec(), 1);
        CHECK_THROWS_AS(apply_freeze(p, {"no.such.group"}), MaskError);
        CHECK_THROWS_AS(apply_freeze(p, {"zzz*"}), MaskError);
    }

    TEST_CASE("prefix masks clear whole blocks") {
        ModelParams p = build_model(tiny_spec(), 1);
        apply_freeze(p, {"block1*"});
        for (const auto& [name, flag] : p.trainable) {
            if (name.rfind("block1", 0) == 0)
                CHECK_FALSE(flag);
            else
                CHECK(flag);
        }
    }

    TEST_CASE("frozen tensors are bit-identical across optimizer steps") {
        const ModelSpec spec = tiny_spec(8, 2);
        SynthSpec synth;
        synth.identity_count = 2;
        synth.images_per_session = 3;
        synth.side = 32;
        auto samples = synth_generate(synth);
        // shrink to the spec input
        for (auto& s : samples)
            s.image = crop_roi(s.image, s.image.width / 2, s.image.height / 2, 8);
        std::vector<LabeledSample> train_set;
        for (const auto& s : samples)
            if (s.session == 1) train_set.push_back(s);

        TrainConfig cfg;
        cfg.theta = 1.0;
        cfg.epochs = 3;
        cfg.batch_p = 2;
        cfg.batch_k = 2;
        cfg.lr = 1e-3;
        cfg.freeze = {"block1.conv1.weight", "block1.conv1.bias"};
        auto [params, report] = train(train_set, {}, spec, cfg);

        const ModelParams init = build_model(spec, cfg.seed);
        CHECK(params.tensors.at("block1.conv1.weight").values() ==
              init.tensors.at("block1.conv1.weight").values());
        CHECK(params.tensors.at("block1.conv1.bias").values() ==
              init.tensors.at("block1.conv1.bias").values());
        // something else must have moved
        CHECK(params.tensors.at("head.out.weight").values() !=
              init.tensors.at("head.out.weight").values());
    }
}

TEST_SUITE("modularity") {
    TEST_CASE("toggling attention only adds/removes attention groups") {
        ModelSpec with = tiny_spec();
        ModelSpec without = tiny_spec();
        without.spatial_attention = false;
        without.blocks[0].channel_attention = false;

        const ModelParams a = build_model(with, 77);
        const ModelParams b = build_model(without, 77);

        for (const auto& [name, t] : b.tensors) {
            REQUIRE(a.tensors.count(name) == 1);
            CHECK(a.tensors.at(name).values() == t.values());
        }
        for (const auto& [name, t] : a.tensors) {
            if (b.tensors.count(name)) continue;
            const bool is_attention = name.rfind("spatial_attention", 0) == 0 ||
                                      name.find(".ca.") != std::string::npos;
            CHECK(is_attention);
        }
    }
}

TEST_SUITE("spec JSON") {
    TEST_CASE("round-trips through JSON") {
        const ModelSpec spec = ModelSpec::desk_default(10, 64);
        const ModelSpec back = ModelSpec::from_json(spec.to_json());
        CHECK(back.to_json() == spec.to_json());
        CHECK(back.embed_dim() == spec.embed_dim());
    }

    TEST_CASE("missing fields are spec errors") {
        CHECK_THROWS_AS(ModelSpec::from_json("{}"), SpecError);
        CHECK_THROWS_AS(ModelSpec::from_json("not json"), SpecError);
    }
}

TEST_SUITE("model gradients") {
    TEST_CASE("full model with multitask loss passes gradient_check") {
        const ModelSpec spec = tiny_spec(8, 2);
        const ModelParams params = build_model(spec, 13);
        const std::vector<std::string> ids = {"a", "a", "b", "b"};
        const std::vector<std::size_t> labels = {0, 0, 1, 1};
        TrainConfig cfg;
        cfg.theta = 0.3;
        cfg.lambda = 0.01;

        // order: all named parameters (map order), then the 4 inputs
        std::vector<std::string> names;
        std::vector<Tensor> point;
        for (const auto& [name, t] : params.tensors) {
            names.push_back(name);
            point.push_back(t);
        }
        Rng rng(61);
        for (int i = 0; i < 4; ++i) {
            Tensor x({1, 8, 8});
            for (double& v : x.values()) v = rng.uniform(0.1, 1.0);
            point.push_back(x);
        }

        const double err = gradient_check(
            [&](Tape& t, const std::vector<Var>& leaves) {
                std::map<std::string, Var> leaf_map;
                for (std::size_t i = 0; i < names.size(); ++i)
                    leaf_map.emplace(names[i], leaves[i]);
                std::vector<Var> logits, embeds;
                for (int s = 0; s < 4; ++s) {
                    ForwardVars fw = forward_model(t, leaf_map, spec,
                                                   leaves[names.size() + s],
                                                   mix_seed(99, s), true);
                    logits.push_back(fw.logits);
                    embeds.push_back(fw.embedding);
                }
                return multitask_loss_tape(t, logits, labels, embeds, ids, leaf_map,
                                           params, cfg);
            },
            point);
        CHECK(err < 1e-4);
    }
}
