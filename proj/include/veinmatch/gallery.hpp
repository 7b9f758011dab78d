#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "veinmatch/gray_image.hpp"
#include "veinmatch/matching.hpp"
#include "veinmatch/model.hpp"

namespace veinmatch {

struct GalleryEntry {
    std::string id;
    std::vector<double> embedding;
    double norm = 0.0;
    std::string created; // ISO-8601 UTC; honors SOURCE_DATE_EPOCH
};

struct Gallery {
    std::string model_hash;
    std::vector<GalleryEntry> entries;

    const GalleryEntry* find(const std::string& id) const;
};

// Line-delimited JSON with a version header; see docs/formats.md. Readers
// only ever see a fully renamed file.
Gallery read_gallery(const std::filesystem::path& path);

// Mean-of-embeddings enrollment. Creates the gallery (with the model's
// content hash) when absent; rejects a hash mismatch with an existing one.
// Single writer enforced through an advisory .lock file.
GalleryEntry enroll(const std::filesystem::path& path, const std::string& subject_id,
                    const std::vector<GrayImage>& images, const ModelParams& model);

struct VerifyResult {
    double score = 0.0;
    bool accepted = false;
    double seconds = 0.0; // embed + cosine + decision
};

// Scores a probe against the enrolled embedding with the strict s > alpha
// rule. use_f32 switches the embedding pass to the float32 inference path.
VerifyResult verify(const std::filesystem::path& path, const std::string& subject_id,
                    const GrayImage& probe, const ModelParams& model, double alpha,
                    bool use_f32 = false);

} // namespace veinmatch
