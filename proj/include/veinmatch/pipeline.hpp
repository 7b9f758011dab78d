#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "veinmatch/dataset.hpp"
#include "veinmatch/matching.hpp"
#include "veinmatch/model.hpp"

namespace veinmatch {

// "identity/session/imgNN" — the image id used in similarity records.
std::string sample_source_id(const LabeledSample& s);

// Embeds every sample in order (inference mode). use_f32 selects the
// float inference path.
std::vector<Embedding> embed_samples(const ModelParams& params,
                                     const std::vector<LabeledSample>& samples,
                                     bool use_f32 = false);

// Model directory layout: <dir>/model_spec.json + <dir>/checkpoint.bin.
void save_model(const ModelParams& params, const std::filesystem::path& dir);
ModelParams load_model(const std::filesystem::path& dir);

} // namespace veinmatch
