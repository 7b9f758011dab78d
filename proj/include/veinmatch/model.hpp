#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "veinmatch/checkpoint.hpp"
#include "veinmatch/tape.hpp"
#include "veinmatch/tensor.hpp"

namespace veinmatch {

struct BlockSpec {
    std::size_t convs = 2;
    std::size_t kernel = 3; // odd; padded to preserve H,W
    std::size_t channels = 16;
    bool pool = true;
    bool channel_attention = true;
};

struct HeadSpec {
    std::vector<std::size_t> hidden = {128};
    double dropout = 0.5;
    std::size_t classes = 10;
};

// Architecture description. JSON field names are fixed in docs/formats.md.
struct ModelSpec {
    std::size_t input_channels = 1;
    std::size_t input_height = 64;
    std::size_t input_width = 64;
    std::vector<BlockSpec> blocks;
    bool spatial_attention = true;
    std::size_t attention_reduction = 4;
    HeadSpec head;
    std::string embed_tap; // a layer name from tap_names(); empty = last block out

    // 3 blocks of (2 convs, 16/32/64 channels, pool), 128-wide head.
    static ModelSpec desk_default(std::size_t classes, std::size_t side = 64);

    void validate() const;

    std::vector<std::string> tap_names() const;
    std::string resolved_tap() const;
    // Flattened size of the tap layer.
    std::size_t embed_dim() const;
    // Flattened size of the last block output (head input).
    std::size_t flat_dim() const;

    std::string to_json() const;
    static ModelSpec from_json(const std::string& text);
};

// Named parameter tensors plus per-group trainable flags.
struct ModelParams {
    ModelSpec spec;
    NamedTensors tensors;
    std::map<std::string, bool> trainable;

    std::vector<std::string> trainable_names() const;
};

// Deterministic fan-in-scaled uniform initialization; each tensor draws from
// its own (seed, name)-derived stream so toggling optional modules leaves
// the remaining tensors untouched.
ModelParams build_model(const ModelSpec& spec, std::uint64_t seed);

// Suppresses gradients for the named groups. Entries are exact tensor names
// or prefixes ending in '*'. An entry matching nothing is a MaskError.
void apply_freeze(ModelParams& params, const std::vector<std::string>& mask);

// Tape-level forward pass. Parameters enter as leaves (see make_param_leaves)
// so one tape can share them across the samples of a batch.
struct ForwardVars {
    Var logits;
    Var embedding; // flattened tap activation, dropout-free path
};

std::map<std::string, Var> make_param_leaves(Tape& tape, const ModelParams& params);
ForwardVars forward_model(Tape& tape, const std::map<std::string, Var>& leaves,
                          const ModelSpec& spec, Var input, std::uint64_t dropout_seed,
                          bool training);

// Eager conveniences used by evaluation and the CLI.
Tensor forward_logits(const ModelParams& params, const Tensor& x, std::uint64_t seed,
                      bool training);
std::vector<double> extract_embedding(const ModelParams& params, const Tensor& x);

// FNV-1a over the spec JSON and the checkpoint bytes; embedded in galleries.
std::string model_content_hash(const ModelParams& params);

// Standalone attention blocks (the model wires these same graphs inline).
Var spatial_attention_op(Tape& tape, Var x, Var conv_w, Var conv_b);
Var channel_attention_op(Tape& tape, Var x, Var fc1_w, Var fc1_b, Var fc2_w, Var fc2_b);

} // namespace veinmatch
