#pragma once

#include <cstddef>
#include <cstring>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "flsim/error.hpp"

namespace flsim {

/// Dense n-dimensional array with a flat row-major buffer. The element type is
/// float for experiment runs and double for verification paths.
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>);

public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> dims, T fill = T{}) : dims_(std::move(dims)) {
        data_.assign(checked_size(dims_), fill);
    }

    static Tensor from_data(std::vector<std::size_t> dims, std::vector<T> data) {
        Tensor t;
        if (checked_size(dims) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match extents product " +
                             std::to_string(checked_size(dims)));
        }
        t.dims_ = std::move(dims);
        t.data_ = std::move(data);
        return t;
    }

    const std::vector<std::size_t>& dims() const { return dims_; }
    std::size_t rank() const { return dims_.size(); }
    std::size_t dim(std::size_t i) const { return dims_[i]; }
    std::size_t size() const { return data_.size(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

    void fill(T v) {
        for (auto& x : data_) x = v;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.dims_ == b.dims_ && a.data_ == b.data_;
    }

private:
    static std::size_t checked_size(const std::vector<std::size_t>& dims) {
        if (dims.empty()) throw ShapeError("tensor rank must be at least 1");
        std::size_t n = 1;
        for (std::size_t d : dims) {
            if (d == 0) throw ShapeError("tensor extents must be at least 1");
            n *= d;
        }
        return n;
    }

    std::vector<std::size_t> dims_;
    std::vector<T> data_;
};

/// Exact representation equality (distinguishes -0.0 from +0.0, unlike ==).
template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.dims() == b.dims() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <typename T>
bool bitwise_equal(const std::vector<Tensor<T>>& a, const std::vector<Tensor<T>>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!bitwise_equal(a[i], b[i])) return false;
    }
    return true;
}

}  // namespace flsim
