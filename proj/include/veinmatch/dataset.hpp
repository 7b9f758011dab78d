#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "veinmatch/gray_image.hpp"

namespace veinmatch {

struct LabeledSample {
    GrayImage image;
    std::string identity;
    int session = 1; // capture session, 1 or 2
    int index = 0;   // position within the session
};

// train/validation come from session 1 of the retained identities;
// match_gallery/match_probes are sessions 1/2 of the held-out identities.
// Session-2 images of retained identities land in `unused` so the five
// buckets partition the input exactly.
struct DatasetSplit {
    std::vector<LabeledSample> train;
    std::vector<LabeledSample> validation;
    std::vector<LabeledSample> match_gallery;
    std::vector<LabeledSample> match_probes;
    std::vector<LabeledSample> unused;
};

// Synthetic palm-vein generator: dark curvilinear strokes on a bright
// textured background, identity-determined geometry, per-image session/index
// jitter (brightness, <=3 px translation, noise).
struct SynthSpec {
    std::size_t identity_count = 10;
    std::size_t images_per_session = 6;
    std::size_t side = 64;          // >= 32
    std::uint64_t identity_seed = 42;
    double session_noise = 8.0;     // additive Gaussian sigma per pixel
    std::size_t curve_count = 4;    // strokes per identity

    void validate() const;
};

std::vector<LabeledSample> synth_generate(const SynthSpec& spec);

// Layout: root/<identity>/<session 1|2>/<image>.pgm, lexicographic order.
std::vector<LabeledSample> load_dataset(const std::filesystem::path& root);
void save_dataset(const std::vector<LabeledSample>& samples,
                  const std::filesystem::path& root);

// Holds out the last `held_out_identities` (sorted order) for matching and
// carves a per-identity validation share out of the remaining session-1
// images.
DatasetSplit split(const std::vector<LabeledSample>& samples,
                   std::size_t held_out_identities, double val_fraction);

// Classifies validation images by nearest per-identity mean pixel vector.
// The floor any learned model must beat.
double nearest_centroid_oracle(const std::vector<LabeledSample>& train,
                               const std::vector<LabeledSample>& validation);
double nearest_centroid_oracle(const DatasetSplit& s);

std::vector<std::string> sorted_identities(const std::vector<LabeledSample>& samples);

} // namespace veinmatch
