#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "veinmatch/errors.hpp"

namespace veinmatch {

// Dense row-major N-d array of doubles. Shapes are immutable after
// construction; data is freely mutable by owners.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
        : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(element_count(shape_), fill);
    }

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (data_.size() != element_count(shape_))
            throw DimensionError("Tensor: data length " + std::to_string(data_.size()) +
                                 " does not match shape product " +
                                 std::to_string(element_count(shape_)));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t e : shape) n *= e;
        return n;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // 3-d accessor (channel, row, col); the layout every image-shaped tensor uses.
    double& at3(std::size_t c, std::size_t y, std::size_t x) {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }
    double at3(std::size_t c, std::size_t y, std::size_t x) const {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }

    double& at2(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at2(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    Tensor reshaped(std::vector<std::size_t> new_shape) const {
        if (element_count(new_shape) != data_.size())
            throw DimensionError("Tensor::reshaped: element count mismatch");
        return Tensor(std::move(new_shape), data_);
    }

    std::string shape_string() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

private:
    void validate_shape() const {
        if (shape_.empty()) throw DimensionError("Tensor: empty shape");
        for (std::size_t e : shape_)
            if (e == 0) throw DimensionError("Tensor: zero extent in shape");
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

} // namespace veinmatch
