#include "cemu/array.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace cemu {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Array::Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
        throw ContractViolation("Array: shape " + shape_string(shape_) + " does not match " +
                                std::to_string(data_.size()) + " values");
    }
}

Array Array::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Array({n}, std::move(values));
}

Array Array::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Array({rows, cols}, std::move(values));
}

std::size_t Array::rows() const {
    if (shape_.empty()) throw ContractViolation("rows() on rank-0 array");
    return shape_[0];
}

std::size_t Array::cols() const {
    if (shape_.size() != 2) throw ContractViolation("cols() requires a matrix, got " + shape_string(shape_));
    return shape_[1];
}

double Array::item() const {
    if (data_.size() != 1) throw ContractViolation("item() on array of shape " + shape_string(shape_));
    return data_[0];
}

Array Array::reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
        throw ContractViolation("reshape " + shape_string(shape_) + " -> " + shape_string(shape));
    }
    return Array(std::move(shape), data_);
}

bool Array::all_finite() const noexcept {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace cemu
