#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace robself::diff {

// Shape mismatches between operands.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violated operation preconditions (non-shape).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values produced by an operator.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense n-dimensional array, row-major, rank 0..4. Images and feature maps
// use {C,H,W}, convolution weights {O,I,k,k}, biases {n}, scalars {1}.
template <std::floating_point T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(count(shape_), T(0));
    }

    Tensor(std::vector<int> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (count(shape_) != static_cast<std::int64_t>(data_.size()))
            throw DimensionError("tensor: data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string());
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    static Tensor full(std::vector<int> shape, T v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }
    bool is_scalar() const { return size() == 1; }

    // {C,H,W} accessors
    int channels() const { return require_rank3_(), shape_[0]; }
    int height() const { return require_rank3_(), shape_[1]; }
    int width() const { return require_rank3_(), shape_[2]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }

    T& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
    T operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

    T& at(int c, int y, int x) {
        return data_[static_cast<size_t>((static_cast<std::int64_t>(c) * shape_[1] + y) * shape_[2] + x)];
    }
    T at(int c, int y, int x) const {
        return data_[static_cast<size_t>((static_cast<std::int64_t>(c) * shape_[1] + y) * shape_[2] + x)];
    }
    // {O,I,h,w} accessor
    T& at4(int o, int i, int y, int x) {
        return data_[static_cast<size_t>(((static_cast<std::int64_t>(o) * shape_[1] + i) * shape_[2] + y) * shape_[3] + x)];
    }
    T at4(int o, int i, int y, int x) const {
        return data_[static_cast<size_t>(((static_cast<std::int64_t>(o) * shape_[1] + i) * shape_[2] + y) * shape_[3] + x)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    T sum() const {
        T s = 0;
        for (const T& v : data_) s += v;
        return s;
    }

    T mean() const { return data_.empty() ? T(0) : sum() / static_cast<T>(data_.size()); }

    std::string shape_string() const {
        std::string s = "[";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

    static std::int64_t count(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw DimensionError("tensor: negative extent");
            n *= d;
        }
        return shape.empty() ? 1 : n;
    }

private:
    void require_rank3_() const {
        if (shape_.size() != 3) throw DimensionError("tensor: expected rank-3 {C,H,W}, got " + shape_string());
    }

    std::vector<int> shape_;
    std::vector<T> data_;
};

template <std::floating_point To, std::floating_point From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    std::vector<To> out(t.values().begin(), t.values().end());
    return Tensor<To>(t.shape(), std::move(out));
}

template <std::floating_point T>
void ensure_finite(const Tensor<T>& t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string(op) + ": produced non-finite values");
}

template <std::floating_point T>
void ensure_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

}  // namespace robself::diff
