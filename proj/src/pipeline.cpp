#include "veinmatch/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "veinmatch/infer32.hpp"

namespace veinmatch {

namespace fs = std::filesystem;

std::string sample_source_id(const LabeledSample& s) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "img%02d", s.index);
    return s.identity + "/" + std::to_string(s.session) + "/" + buf;
}

std::vector<Embedding> embed_samples(const ModelParams& params,
                                     const std::vector<LabeledSample>& samples,
                                     bool use_f32) {
    std::vector<Embedding> out;
    out.reserve(samples.size());
    if (use_f32) {
        const Infer32 engine(params);
        for (const LabeledSample& s : samples) {
            Embedding e;
            e.values = engine.embed(s.image);
            e.source_id = sample_source_id(s);
            e.identity = s.identity;
            out.push_back(std::move(e));
        }
        return out;
    }
    // Chunked so tape memory stays bounded on long sample lists.
    constexpr std::size_t kChunk = 16;
    for (std::size_t base = 0; base < samples.size(); base += kChunk) {
        Tape tape;
        const auto leaves = make_param_leaves(tape, params);
        const std::size_t end = std::min(base + kChunk, samples.size());
        for (std::size_t i = base; i < end; ++i) {
            Var input = tape.leaf(to_tensor(samples[i].image), false);
            Embedding e;
            e.values = forward_model(tape, leaves, params.spec, input, 0, false)
                           .embedding.value()
                           .values();
            e.source_id = sample_source_id(samples[i]);
            e.identity = samples[i].identity;
            out.push_back(std::move(e));
        }
    }
    return out;
}

void save_model(const ModelParams& params, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream spec_out(dir / "model_spec.json", std::ios::trunc);
    if (!spec_out) throw IngestError("save_model: cannot write to " + dir.string());
    spec_out << params.spec.to_json();
    write_checkpoint(params.tensors, dir / "checkpoint.bin");
}

ModelParams load_model(const fs::path& dir) {
    std::ifstream spec_in(dir / "model_spec.json");
    if (!spec_in)
        throw IngestError("load_model: missing " + (dir / "model_spec.json").string());
    std::stringstream ss;
    ss << spec_in.rdbuf();

    ModelParams params;
    params.spec = ModelSpec::from_json(ss.str());
    params.tensors = read_checkpoint(dir / "checkpoint.bin");

    // Shape-check against a freshly built skeleton.
    const ModelParams skeleton = build_model(params.spec, 0);
    if (skeleton.tensors.size() != params.tensors.size())
        throw IngestError("load_model: checkpoint tensor set does not match spec");
    for (const auto& [name, t] : skeleton.tensors) {
        const auto it = params.tensors.find(name);
        if (it == params.tensors.end())
            throw IngestError("load_model: checkpoint missing tensor " + name);
        if (it->second.shape() != t.shape())
            throw IngestError("load_model: shape mismatch for " + name);
        params.trainable[name] = true;
    }
    return params;
}

} // namespace veinmatch
