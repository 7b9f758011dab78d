#include "veinmatch/model.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "veinmatch/errors.hpp"
#include "veinmatch/rng.hpp"

namespace veinmatch {

using nlohmann::json;

// ---------------------------------------------------------------------------
// ModelSpec
// ---------------------------------------------------------------------------

ModelSpec ModelSpec::desk_default(std::size_t classes, std::size_t side) {
    ModelSpec spec;
    spec.input_height = side;
    spec.input_width = side;
    spec.blocks = {
        {2, 3, 16, true, true},
        {2, 3, 32, true, true},
        {2, 3, 64, true, true},
    };
    spec.head.hidden = {128};
    spec.head.dropout = 0.5;
    spec.head.classes = classes;
    return spec;
}

void ModelSpec::validate() const {
    if (input_channels != 1)
        throw SpecError("ModelSpec: input channels must be 1 (grayscale)");
    if (input_height == 0 || input_width == 0)
        throw SpecError("ModelSpec: input dimensions must be positive");
    if (blocks.empty()) throw SpecError("ModelSpec: at least one block required");
    for (const BlockSpec& b : blocks) {
        if (b.convs < 1) throw SpecError("ModelSpec: block conv count must be >= 1");
        if (b.channels < 1) throw SpecError("ModelSpec: block channels must be >= 1");
        if (b.kernel % 2 == 0 || b.kernel == 0)
            throw SpecError("ModelSpec: conv kernel must be odd");
    }
    if (head.classes < 2) throw SpecError("ModelSpec: class count must be >= 2");
    if (!(head.dropout >= 0.0 && head.dropout < 1.0))
        throw SpecError("ModelSpec: dropout must be in [0,1)");
    if (attention_reduction < 1)
        throw SpecError("ModelSpec: attention reduction must be >= 1");

    // Every pool halves the map; it must stay nonempty.
    std::size_t h = input_height, w = input_width;
    for (const BlockSpec& b : blocks) {
        if (b.pool) {
            if (h < 2 || w < 2)
                throw SpecError("ModelSpec: feature map too small to pool");
            h /= 2;
            w /= 2;
        }
    }

    if (!embed_tap.empty()) {
        const auto names = tap_names();
        if (std::find(names.begin(), names.end(), embed_tap) == names.end())
            throw SpecError("ModelSpec: embed_tap '" + embed_tap +
                            "' names no existing layer");
    }
}

std::vector<std::string> ModelSpec::tap_names() const {
    std::vector<std::string> names = {"input"};
    for (std::size_t k = 1; k <= blocks.size(); ++k)
        names.push_back("block" + std::to_string(k) + ".out");
    return names;
}

std::string ModelSpec::resolved_tap() const {
    if (!embed_tap.empty()) return embed_tap;
    return "block" + std::to_string(blocks.size()) + ".out";
}

namespace {

// Shape of the named layer's output.
void layer_shape(const ModelSpec& spec, const std::string& tap, std::size_t& c,
                 std::size_t& h, std::size_t& w) {
    c = spec.input_channels;
    h = spec.input_height;
    w = spec.input_width;
    if (tap == "input") return;
    for (std::size_t k = 0; k < spec.blocks.size(); ++k) {
        const BlockSpec& b = spec.blocks[k];
        c = b.channels;
        if (b.pool) {
            h /= 2;
            w /= 2;
        }
        if (tap == "block" + std::to_string(k + 1) + ".out") return;
    }
}

} // namespace

std::size_t ModelSpec::embed_dim() const {
    std::size_t c, h, w;
    layer_shape(*this, resolved_tap(), c, h, w);
    return c * h * w;
}

std::size_t ModelSpec::flat_dim() const {
    std::size_t c, h, w;
    layer_shape(*this, "block" + std::to_string(blocks.size()) + ".out", c, h, w);
    return c * h * w;
}

std::string ModelSpec::to_json() const {
    json j;
    j["input"] = {{"channels", input_channels},
                  {"height", input_height},
                  {"width", input_width}};
    j["blocks"] = json::array();
    for (const BlockSpec& b : blocks)
        j["blocks"].push_back({{"convs", b.convs},
                               {"kernel", b.kernel},
                               {"channels", b.channels},
                               {"pool", b.pool},
                               {"channel_attention", b.channel_attention}});
    j["spatial_attention"] = spatial_attention;
    j["attention_reduction"] = attention_reduction;
    j["head"] = {{"hidden", head.hidden},
                 {"dropout", head.dropout},
                 {"classes", head.classes}};
    j["embed_tap"] = resolved_tap();
    return j.dump(2) + "\n";
}

ModelSpec ModelSpec::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw SpecError(std::string("ModelSpec: invalid JSON: ") + e.what());
    }
    try {
        ModelSpec spec;
        spec.input_channels = j.at("input").at("channels").get<std::size_t>();
        spec.input_height = j.at("input").at("height").get<std::size_t>();
        spec.input_width = j.at("input").at("width").get<std::size_t>();
        spec.blocks.clear();
        for (const auto& jb : j.at("blocks")) {
            BlockSpec b;
            b.convs = jb.at("convs").get<std::size_t>();
            b.kernel = jb.value("kernel", std::size_t{3});
            b.channels = jb.at("channels").get<std::size_t>();
            b.pool = jb.value("pool", true);
            b.channel_attention = jb.value("channel_attention", true);
            spec.blocks.push_back(b);
        }
        spec.spatial_attention = j.value("spatial_attention", true);
        spec.attention_reduction = j.value("attention_reduction", std::size_t{4});
        spec.head.hidden = j.at("head").at("hidden").get<std::vector<std::size_t>>();
        spec.head.dropout = j.at("head").at("dropout").get<double>();
        spec.head.classes = j.at("head").at("classes").get<std::size_t>();
        spec.embed_tap = j.value("embed_tap", std::string{});
        spec.validate();
        return spec;
    } catch (const json::exception& e) {
        throw SpecError(std::string("ModelSpec: missing or mistyped field: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

std::vector<std::string> ModelParams::trainable_names() const {
    std::vector<std::string> names;
    for (const auto& [name, flag] : trainable)
        if (flag) names.push_back(name);
    return names;
}

namespace {

std::size_t reduced_width(std::size_t channels, std::size_t reduction) {
    return std::max<std::size_t>(1, channels / reduction);
}

Tensor init_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                    std::uint64_t seed, const std::string& name) {
    Rng rng(mix_seed(seed, name));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.uniform(-bound, bound);
    return t;
}

// Enumerates every parameter tensor of a spec in declaration order.
template <typename Fn>
void for_each_param(const ModelSpec& spec, Fn&& fn) {
    if (spec.spatial_attention) {
        fn("spatial_attention.conv.weight",
           std::vector<std::size_t>{1, 2, 7, 7}, std::size_t{2 * 7 * 7});
        fn("spatial_attention.conv.bias", std::vector<std::size_t>{1}, std::size_t{0});
    }
    std::size_t cin = spec.input_channels;
    for (std::size_t k = 0; k < spec.blocks.size(); ++k) {
        const BlockSpec& b = spec.blocks[k];
        const std::string prefix = "block" + std::to_string(k + 1);
        for (std::size_t j = 0; j < b.convs; ++j) {
            const std::string conv = prefix + ".conv" + std::to_string(j + 1);
            const std::size_t in_ch = (j == 0) ? cin : b.channels;
            fn(conv + ".weight",
               std::vector<std::size_t>{b.channels, in_ch, b.kernel, b.kernel},
               in_ch * b.kernel * b.kernel);
            fn(conv + ".bias", std::vector<std::size_t>{b.channels}, std::size_t{0});
        }
        if (b.channel_attention) {
            const std::size_t red = reduced_width(b.channels, spec.attention_reduction);
            fn(prefix + ".ca.fc1.weight", std::vector<std::size_t>{red, b.channels},
               b.channels);
            fn(prefix + ".ca.fc1.bias", std::vector<std::size_t>{red}, std::size_t{0});
            fn(prefix + ".ca.fc2.weight", std::vector<std::size_t>{b.channels, red}, red);
            fn(prefix + ".ca.fc2.bias", std::vector<std::size_t>{b.channels},
               std::size_t{0});
        }
        cin = b.channels;
    }
    std::size_t in_dim = spec.flat_dim();
    for (std::size_t i = 0; i < spec.head.hidden.size(); ++i) {
        const std::string fc = "head.fc" + std::to_string(i + 1);
        fn(fc + ".weight", std::vector<std::size_t>{spec.head.hidden[i], in_dim}, in_dim);
        fn(fc + ".bias", std::vector<std::size_t>{spec.head.hidden[i]}, std::size_t{0});
        in_dim = spec.head.hidden[i];
    }
    fn("head.out.weight", std::vector<std::size_t>{spec.head.classes, in_dim}, in_dim);
    fn("head.out.bias", std::vector<std::size_t>{spec.head.classes}, std::size_t{0});
}

} // namespace

ModelParams build_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    ModelParams params;
    params.spec = spec;
    for_each_param(spec, [&](const std::string& name, std::vector<std::size_t> shape,
                             std::size_t fan_in) {
        Tensor t = fan_in == 0 ? Tensor(std::move(shape), 0.0)
                               : init_uniform(std::move(shape), fan_in, seed, name);
        params.tensors.emplace(name, std::move(t));
        params.trainable[name] = true;
    });
    return params;
}

void apply_freeze(ModelParams& params, const std::vector<std::string>& mask) {
    for (const std::string& entry : mask) {
        bool matched = false;
        if (!entry.empty() && entry.back() == '*') {
            const std::string prefix = entry.substr(0, entry.size() - 1);
            for (auto& [name, flag] : params.trainable)
                if (name.rfind(prefix, 0) == 0) {
                    flag = false;
                    matched = true;
                }
        } else {
            auto it = params.trainable.find(entry);
            if (it != params.trainable.end()) {
                it->second = false;
                matched = true;
            }
        }
        if (!matched)
            throw MaskError("apply_freeze: '" + entry + "' matches no parameter group");
    }
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

Var spatial_attention_op(Tape& tape, Var x, Var conv_w, Var conv_b) {
    Var pooled = tape.concat_channels(tape.channel_mean(x), tape.channel_max(x));
    Var attention = tape.sigmoid(tape.conv2d(pooled, conv_w, conv_b, 1, 3));
    return tape.mul_spatial(x, attention);
}

Var channel_attention_op(Tape& tape, Var x, Var fc1_w, Var fc1_b, Var fc2_w, Var fc2_b) {
    Var avg_path = tape.dense(tape.relu(tape.dense(tape.global_avg(x), fc1_w, fc1_b)),
                              fc2_w, fc2_b);
    Var max_path = tape.dense(tape.relu(tape.dense(tape.global_max(x), fc1_w, fc1_b)),
                              fc2_w, fc2_b);
    Var gates = tape.sigmoid(tape.add(avg_path, max_path));
    return tape.mul_channel(x, gates);
}

std::map<std::string, Var> make_param_leaves(Tape& tape, const ModelParams& params) {
    std::map<std::string, Var> leaves;
    for (const auto& [name, t] : params.tensors)
        leaves.emplace(name, tape.leaf(t, params.trainable.at(name)));
    return leaves;
}

ForwardVars forward_model(Tape& tape, const std::map<std::string, Var>& leaves,
                          const ModelSpec& spec, Var input, std::uint64_t dropout_seed,
                          bool training) {
    const auto& in_shape = input.value().shape();
    if (in_shape.size() != 3 || in_shape[0] != spec.input_channels ||
        in_shape[1] != spec.input_height || in_shape[2] != spec.input_width)
        throw DimensionError("forward_model: input shape " +
                             input.value().shape_string() + " does not match spec");

    auto p = [&](const std::string& name) -> Var {
        auto it = leaves.find(name);
        if (it == leaves.end())
            throw ConstraintError("forward_model: missing parameter " + name);
        return it->second;
    };

    const std::string tap = spec.resolved_tap();
    Var x = input;
    Var tap_var = input;

    if (spec.spatial_attention)
        x = spatial_attention_op(tape, x, p("spatial_attention.conv.weight"),
                                 p("spatial_attention.conv.bias"));
    if (tap == "input") tap_var = x;

    for (std::size_t k = 0; k < spec.blocks.size(); ++k) {
        const BlockSpec& b = spec.blocks[k];
        const std::string prefix = "block" + std::to_string(k + 1);
        for (std::size_t j = 0; j < b.convs; ++j) {
            const std::string conv = prefix + ".conv" + std::to_string(j + 1);
            x = tape.relu(
                tape.conv2d(x, p(conv + ".weight"), p(conv + ".bias"), 1, b.kernel / 2));
        }
        if (b.channel_attention)
            x = channel_attention_op(tape, x, p(prefix + ".ca.fc1.weight"),
                                     p(prefix + ".ca.fc1.bias"),
                                     p(prefix + ".ca.fc2.weight"),
                                     p(prefix + ".ca.fc2.bias"));
        if (b.pool) x = tape.maxpool2d(x, 2, 2);
        if (tap == prefix + ".out") tap_var = x;
    }

    Var flat = tape.reshape(x, {x.value().size()});
    Var h = flat;
    for (std::size_t i = 0; i < spec.head.hidden.size(); ++i) {
        const std::string fc = "head.fc" + std::to_string(i + 1);
        h = tape.relu(tape.dense(h, p(fc + ".weight"), p(fc + ".bias")));
        h = tape.dropout(h, spec.head.dropout, mix_seed(dropout_seed, i), training);
    }
    Var logits = tape.dense(h, p("head.out.weight"), p("head.out.bias"));

    ForwardVars out;
    out.logits = logits;
    out.embedding = tape.reshape(tap_var, {tap_var.value().size()});
    return out;
}

Tensor forward_logits(const ModelParams& params, const Tensor& x, std::uint64_t seed,
                      bool training) {
    Tape tape;
    auto leaves = make_param_leaves(tape, params);
    Var input = tape.leaf(x, false);
    return forward_model(tape, leaves, params.spec, input, seed, training).logits.value();
}

std::vector<double> extract_embedding(const ModelParams& params, const Tensor& x) {
    Tape tape;
    auto leaves = make_param_leaves(tape, params);
    Var input = tape.leaf(x, false);
    return forward_model(tape, leaves, params.spec, input, 0, false)
        .embedding.value()
        .values();
}

std::string model_content_hash(const ModelParams& params) {
    const std::string spec_json = params.spec.to_json();
    std::uint64_t h = fnv1a64(spec_json);
    const auto bytes = checkpoint_bytes(params.tensors);
    h = fnv1a64(bytes.data(), bytes.size(), h);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

} // namespace veinmatch
