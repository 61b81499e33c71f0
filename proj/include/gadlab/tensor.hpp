// Copyright (c) 2026 gadlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gadlab {

// Error taxonomy shared by all modules.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Precision : std::uint8_t { Single = 4, Double = 8 };

inline const char* precision_name(Precision p) {
    return p == Precision::Single ? "single" : "double";
}

namespace num {

// Dense row-major tensor. Rank is implied by shape(); most of the codebase
// works with rank-1/rank-2 tensors (vectors and matrices).
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<int> shape)
        : shape_(std::move(shape)), values_(checked_size(shape_), T(0)) {}

    TensorT(std::vector<int> shape, std::vector<T> values)
        : shape_(std::move(shape)), values_(std::move(values)) {
        if (checked_size(shape_) != values_.size()) {
            throw ShapeError("tensor value count " + std::to_string(values_.size()) +
                             " does not match shape " + shape_string());
        }
    }

    static TensorT zeros(int rows, int cols) { return TensorT({rows, cols}); }

    static TensorT row(std::vector<T> v) {
        const int n = static_cast<int>(v.size());
        return TensorT({1, n}, std::move(v));
    }

    static TensorT scalar(T v) { return TensorT({1, 1}, {v}); }

    const std::vector<int>& shape() const { return shape_; }
    std::vector<T>& values() { return values_; }
    const std::vector<T>& values() const { return values_; }

    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    int rows() const { return shape_.empty() ? 0 : shape_[0]; }
    int cols() const {
        if (shape_.size() < 2) return shape_.empty() ? 0 : 1;
        return shape_[1];
    }

    T& at(int r, int c) { return values_[static_cast<std::size_t>(r) * cols() + c]; }
    T at(int r, int c) const { return values_[static_cast<std::size_t>(r) * cols() + c]; }

    T* row_ptr(int r) { return values_.data() + static_cast<std::size_t>(r) * cols(); }
    const T* row_ptr(int r) const { return values_.data() + static_cast<std::size_t>(r) * cols(); }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (T v : values_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

    std::string shape_string() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) os << 'x';
            os << shape_[i];
        }
        os << ']';
        return os.str();
    }

    static constexpr Precision precision() {
        return sizeof(T) == 4 ? Precision::Single : Precision::Double;
    }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> v(values_.size());
        for (std::size_t i = 0; i < values_.size(); ++i) v[i] = static_cast<U>(values_[i]);
        return TensorT<U>(shape_, std::move(v));
    }

private:
    static std::size_t checked_size(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw ShapeError("negative dimension in tensor shape");
            n *= static_cast<std::size_t>(d);
        }
        return shape.empty() ? 0 : n;
    }

    std::vector<int> shape_;
    std::vector<T> values_;
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

}  // namespace num
}  // namespace gadlab
