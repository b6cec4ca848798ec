#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <new>
#include <numeric>
#include <vector>

#include "culm/errors.hpp"

namespace culm {

/// 64-byte aligned storage. Vectorised kernels (Eigen reductions and
/// matrix-vector products over mapped memory) pick their loop peeling from
/// the runtime address; pinning the alignment keeps summation order, and so
/// results, bit-identical between runs.
template <typename T>
struct AlignedAlloc {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAlloc() = default;
    template <typename U>
    AlignedAlloc(const AlignedAlloc<U>&) noexcept {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <typename U>
    bool operator==(const AlignedAlloc<U>&) const noexcept {
        return true;
    }
};

/// Dense row-major n-d array (1-4 dimensions in practice). Value type,
/// deep copies; all shared algorithms operate on these.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape, T fill = T(0))
        : shape_(std::move(shape)) {
        for (auto d : shape_)
            if (d <= 0) throw ArgumentError("tensor dimensions must be positive");
        data_.assign(static_cast<std::size_t>(numel_of(shape_)), fill);
    }

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<std::int64_t> shape, T v) { return Tensor(std::move(shape), v); }

    const std::vector<std::int64_t>& shape() const noexcept { return shape_; }
    int ndim() const noexcept { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // Row-major indexing; the overload arity must match ndim.
    T& operator()(std::int64_t i) { return data_[idx1(i)]; }
    const T& operator()(std::int64_t i) const { return data_[idx1(i)]; }
    T& operator()(std::int64_t i, std::int64_t j) { return data_[idx2(i, j)]; }
    const T& operator()(std::int64_t i, std::int64_t j) const { return data_[idx2(i, j)]; }
    T& operator()(std::int64_t i, std::int64_t j, std::int64_t k) { return data_[idx3(i, j, k)]; }
    const T& operator()(std::int64_t i, std::int64_t j, std::int64_t k) const { return data_[idx3(i, j, k)]; }
    T& operator()(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) { return data_[idx4(i, j, k, l)]; }
    const T& operator()(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) const { return data_[idx4(i, j, k, l)]; }

    bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    T max_value() const {
        if (empty()) throw ArgumentError("max of empty tensor");
        return *std::max_element(data_.begin(), data_.end());
    }
    T min_value() const {
        if (empty()) throw ArgumentError("min of empty tensor");
        return *std::min_element(data_.begin(), data_.end());
    }
    T sum() const { return std::accumulate(data_.begin(), data_.end(), T(0)); }
    T mean() const {
        if (empty()) throw ArgumentError("mean of empty tensor");
        return sum() / static_cast<T>(numel());
    }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    /// Elementwise in-place scaling.
    Tensor& operator*=(T s) {
        for (T& v : data_) v *= s;
        return *this;
    }
    Tensor& operator+=(const Tensor& o) {
        if (!same_shape(o)) throw ArgumentError("tensor shape mismatch in +=");
        for (std::int64_t i = 0; i < numel(); ++i) data_[static_cast<std::size_t>(i)] += o[i];
        return *this;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>((*this)[i]);
        return out;
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (auto d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

private:
    std::size_t idx1(std::int64_t i) const { return static_cast<std::size_t>(i); }
    std::size_t idx2(std::int64_t i, std::int64_t j) const {
        return static_cast<std::size_t>(i * shape_[1] + j);
    }
    std::size_t idx3(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k);
    }
    std::size_t idx4(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) const {
        return static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l);
    }

    std::vector<std::int64_t> shape_;
    std::vector<T, AlignedAlloc<T>> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

} // namespace culm
