#include "tcupgan/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

namespace tcupgan {

std::string Shape::str() const {
    std::ostringstream os;
    os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
    return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(shape), data_(shape.numel(), fill) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
        throw ShapeError("negative tensor dimension " + shape.str());
    }
}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(shape), data_(values.begin(), values.end()) {
    if (data_.size() != shape.numel()) {
        throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                         " does not match shape " + shape.str());
    }
}

std::span<float> Tensor::sample(int n) {
    const std::size_t len = static_cast<std::size_t>(shape_.c) * shape_.plane();
    return {data_.data() + n * len, len};
}

std::span<const float> Tensor::sample(int n) const {
    const std::size_t len = static_cast<std::size_t>(shape_.c) * shape_.plane();
    return {data_.data() + n * len, len};
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_inplace(const Tensor& other) {
    if (!(other.shape_ == shape_)) {
        throw ShapeError("add: " + shape_.str() + " vs " + other.shape_.str());
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

bool Tensor::identical(const Tensor& other) const {
    return shape_ == other.shape_ &&
           std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0;
}

}  // namespace tcupgan
