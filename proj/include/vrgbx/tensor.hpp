// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vrgbx {

/// Dense row-major tensor with value semantics. Videos use the layout
/// [T, 3, H, W]; latent grids use [K, C, H', W'].
template <typename Real>
class BasicTensor {
public:
    BasicTensor() = default;
    explicit BasicTensor(std::vector<int> shape, Real fill = Real(0))
        : shape_(std::move(shape)), data_(count(shape_), fill) {}
    BasicTensor(std::initializer_list<int> shape, Real fill = Real(0))
        : BasicTensor(std::vector<int>(shape), fill) {}
    BasicTensor(std::vector<int> shape, std::vector<Real> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count(shape_)) {
            throw std::invalid_argument("tensor data size does not match shape");
        }
    }

    const std::vector<int>& shape() const noexcept { return shape_; }
    int dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    Real* data() noexcept { return data_.data(); }
    const Real* data() const noexcept { return data_.data(); }
    std::span<Real> span() noexcept { return data_; }
    std::span<const Real> span() const noexcept { return data_; }
    std::vector<Real>& values() noexcept { return data_; }
    const std::vector<Real>& values() const noexcept { return data_; }

    Real& operator[](std::size_t i) noexcept { return data_[i]; }
    Real operator[](std::size_t i) const noexcept { return data_[i]; }

    Real& at(int a, int b, int c, int d) noexcept { return data_[offset(a, b, c, d)]; }
    Real at(int a, int b, int c, int d) const noexcept { return data_[offset(a, b, c, d)]; }

    std::size_t offset(int a, int b, int c, int d) const noexcept {
        return ((static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d;
    }

    /// Contiguous view of the sub-tensor at leading index `i` (e.g. one frame).
    std::span<Real> slice(int i) {
        const std::size_t stride = data_.size() / shape_.at(0);
        return std::span<Real>(data_).subspan(stride * i, stride);
    }
    std::span<const Real> slice(int i) const {
        const std::size_t stride = data_.size() / shape_.at(0);
        return std::span<const Real>(data_).subspan(stride * i, stride);
    }

    void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const BasicTensor& other) const = default;

    static std::size_t count(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int s : shape) {
            if (s < 0) throw std::invalid_argument("negative tensor extent");
            n *= static_cast<std::size_t>(s);
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<Real> data_;
};

using Tensor = BasicTensor<float>;

inline std::string shape_string(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Video dims helper for [T, 3, H, W] tensors.
struct VideoDims {
    int frames = 0;
    int height = 0;
    int width = 0;

    bool operator==(const VideoDims&) const = default;
    std::vector<int> shape() const { return {frames, 3, height, width}; }
};

inline VideoDims video_dims(const Tensor& video) {
    if (video.rank() != 4 || video.dim(1) != 3) {
        throw std::invalid_argument("expected a [T, 3, H, W] video, got " + shape_string(video.shape()));
    }
    return {video.dim(0), video.dim(2), video.dim(3)};
}

}  // namespace vrgbx
