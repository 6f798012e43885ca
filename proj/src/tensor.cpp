#include "echoprompt/tensor.hpp"

#include "echoprompt/error.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace echoprompt {

std::size_t shape_size(const Shape& shape) noexcept
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_string(const Shape& shape)
{
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) {
            out += ",";
        }
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::span<const double> values)
    : Tensor(std::move(shape), Storage(values.begin(), values.end()))
{}

Tensor::Tensor(Shape shape, Storage values) : shape_(std::move(shape)), data_(std::move(values))
{
    if (data_.size() != shape_size(shape_)) {
        throw InvalidArgument("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_string(shape_));
    }
}

double Tensor::item() const
{
    if (data_.size() != 1) {
        throw InvalidArgument("item() on tensor of shape " + shape_string(shape_));
    }
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const
{
    if (shape_size(shape) != data_.size()) {
        throw InvalidArgument("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) noexcept
{
    std::fill(data_.begin(), data_.end(), value);
}

bool Tensor::all_finite() const noexcept
{
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

} // namespace echoprompt
