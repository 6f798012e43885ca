#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace echoprompt {

using Shape = std::vector<std::size_t>;

/// 64-byte aligned storage. Eigen picks its vectorised peel from the data
/// address, so a fixed alignment keeps floating-point reductions identical
/// from run to run.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_size(const Shape& shape) noexcept;
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of doubles. Video features use the channels-last
/// layout [T, H, W, C]; a rank-0 shape holds a single scalar.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::span<const double> values);
    Tensor(Shape shape, const std::vector<double>& values) : Tensor(std::move(shape), std::span<const double>(values)) {}
    Tensor(Shape shape, Storage values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    /// Size of the trailing axis; 1 for scalars.
    std::size_t channels() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
    /// Number of rows when the tensor is viewed as [size / channels, channels].
    std::size_t rows() const noexcept { return channels() == 0 ? 0 : size() / channels(); }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    Storage& storage() noexcept { return data_; }
    const Storage& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    double item() const;

    Tensor reshaped(Shape shape) const;
    void fill(double value) noexcept;
    bool all_finite() const noexcept;

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Shape shape_;
    Storage data_;
};

} // namespace echoprompt
