#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace repl {

/// Error categories surfaced by the library. Every throw site names the
/// offending dimension, key, or file offset in the message.
enum class ErrorKind {
    shape,
    value,
    config,
    io,
    format,
    internal,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::shape: return "shape";
        case ErrorKind::value: return "value";
        case ErrorKind::config: return "config";
        case ErrorKind::io: return "io";
        case ErrorKind::format: return "format";
        case ErrorKind::internal: return "internal";
    }
    return "unknown";
}

class Error : public std::runtime_error {
   public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

   private:
    ErrorKind kind_;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major n-dimensional array. Value semantics; gradients live on
/// the tape, not here.
template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
        check_extents();
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (data_.size() != shape_numel(shape_)) {
            throw Error(ErrorKind::shape, "tensor data length " + std::to_string(data_.size()) +
                                              " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const {
        if (axis >= shape_.size()) {
            throw Error(ErrorKind::shape, "axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
        }
        return shape_[axis];
    }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    const std::vector<T>& vec() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T item() const {
        if (data_.size() != 1) {
            throw Error(ErrorKind::shape, "item() on tensor of shape " + shape_str(shape_));
        }
        return data_[0];
    }

    /// Same data, new shape. Element count must match.
    Tensor reshaped(Shape shape) const& {
        Tensor out = *this;
        out.reshape_inplace(std::move(shape));
        return out;
    }
    Tensor reshaped(Shape shape) && {
        reshape_inplace(std::move(shape));
        return std::move(*this);
    }

    void reshape_inplace(Shape shape) {
        if (shape_numel(shape) != data_.size()) {
            throw Error(ErrorKind::shape, "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        shape_ = std::move(shape);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

   private:
    void check_extents() const {
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (shape_[i] == 0) {
                throw Error(ErrorKind::shape, "extent " + std::to_string(i) + " of shape " + shape_str(shape_) +
                                                  " must be positive");
            }
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw Error(ErrorKind::shape, "max_abs_diff of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    T m{0};
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
    return m;
}

template <typename T>
T l2_norm(std::span<const T> v) {
    long double s = 0;
    for (T x : v) s += static_cast<long double>(x) * x;
    return static_cast<T>(std::sqrt(s));
}

template <typename T>
T l2_norm(const Tensor<T>& t) {
    return l2_norm<T>(t.data());
}

}  // namespace repl
