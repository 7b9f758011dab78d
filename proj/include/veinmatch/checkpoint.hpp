#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "veinmatch/tensor.hpp"

namespace veinmatch {

// Named-tensor container behind the binary checkpoint format documented in
// docs/formats.md. Keys iterate in lexicographic order, which fixes the
// on-disk layout.
using NamedTensors = std::map<std::string, Tensor>;

void write_checkpoint(const NamedTensors& tensors, const std::filesystem::path& path);
NamedTensors read_checkpoint(const std::filesystem::path& path);

// In-memory serialization (also feeds the model content hash).
std::vector<std::uint8_t> checkpoint_bytes(const NamedTensors& tensors);
NamedTensors checkpoint_from_bytes(const std::vector<std::uint8_t>& bytes);

} // namespace veinmatch
