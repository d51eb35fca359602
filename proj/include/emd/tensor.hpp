#pragma once

/// @file tensor.hpp
/// @brief Dense NCHW tensor used by every network component.
///
/// All activations are rank-4 (batch, channels, height, width). Vectors and
/// scalars use trailing unit dimensions, so a classifier output is
/// {N, C, 1, 1} and a loss is {1, 1, 1, 1}.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "emd/errors.hpp"

namespace emd {

struct Shape {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    std::size_t numel() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    bool operator==(const Shape&) const = default;

    std::string str() const {
        return "[" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + "]";
    }
};

template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape_(s), data_(s.numel(), fill) {}
    Tensor(Shape s, std::vector<T> data) : shape_(s), data_(std::move(data)) {
        if (data_.size() != shape_.numel()) {
            throw PreconditionError("tensor data size " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_.str());
        }
    }

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::size_t index(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }
    T& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
    const T& at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

    /// Pointer to the (n, c) spatial plane.
    T* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
    const T* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    /// Reinterpret with a new shape of identical element count.
    Tensor reshaped(Shape s) const {
        if (s.numel() != shape_.numel()) {
            throw PreconditionError("cannot reshape " + shape_.str() + " to " + s.str());
        }
        return Tensor(s, data_);
    }

    /// Copy of sample n as a batch of one.
    Tensor sample(int n) const {
        Shape s = shape_;
        s.n = 1;
        const std::size_t len = s.numel();
        std::vector<T> out(data_.begin() + static_cast<std::ptrdiff_t>(n * len),
                           data_.begin() + static_cast<std::ptrdiff_t>((n + 1) * len));
        return Tensor(s, std::move(out));
    }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        for (const T& v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    Shape shape_{0, 0, 0, 0};
    std::vector<T> data_;
};

/// Concatenate along the batch axis; all other dimensions must agree.
template <class T>
Tensor<T> stack_batch(const std::vector<const Tensor<T>*>& items) {
    if (items.empty()) throw PreconditionError("stack_batch: no items");
    Shape s = items.front()->shape();
    s.n = 0;
    for (const auto* t : items) {
        const Shape ts = t->shape();
        if (ts.c != s.c || ts.h != s.h || ts.w != s.w) throw PreconditionError("stack_batch: shape mismatch");
        s.n += ts.n;
    }
    std::vector<T> out;
    out.reserve(s.numel());
    for (const auto* t : items) out.insert(out.end(), t->vec().begin(), t->vec().end());
    return Tensor<T>(s, std::move(out));
}

}  // namespace emd
