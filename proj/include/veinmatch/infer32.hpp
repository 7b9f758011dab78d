#pragma once

#include <vector>

#include "veinmatch/gray_image.hpp"
#include "veinmatch/model.hpp"

namespace veinmatch {

// Float32 inference path for the embedding extractor. Exists for the
// latency budget only; training and all reference numerics stay in doubles.
class Infer32 {
public:
    explicit Infer32(const ModelParams& params);

    // Embedding at the spec's tap, widened back to doubles for matching.
    std::vector<double> embed(const GrayImage& img) const;
    std::vector<double> embed(const Tensor& x) const;

private:
    struct TensorF {
        std::vector<std::size_t> shape;
        std::vector<float> data;
    };

    const TensorF& tensor(const std::string& name) const;

    ModelSpec spec_;
    std::map<std::string, TensorF> tensors_;
};

} // namespace veinmatch
