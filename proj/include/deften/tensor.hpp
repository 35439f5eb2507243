#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace deften {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrixd = Matrix<double>;
using Vectord = Vector<double>;

inline Index shape_size(const Shape& shape) {
    Index n = 1;
    for (Index d : shape) n *= d;
    return n;
}

inline std::string shape_to_string(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

// Dense N-dimensional array with row-major element order. The flat index of
// element (i_0, ..., i_{N-1}) is i_0 * stride_0 + ... + i_{N-1}, where
// stride_k is the product of all dimensions after k.
template <typename Scalar>
class DenseTensor {
public:
    DenseTensor() = default;

    explicit DenseTensor(Shape shape) : shape_(std::move(shape)) {
        validate_shape(shape_);
        data_.assign(static_cast<std::size_t>(shape_size(shape_)), Scalar(0));
    }

    DenseTensor(Shape shape, std::vector<Scalar> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape(shape_);
        if (static_cast<Index>(data_.size()) != shape_size(shape_))
            throw std::invalid_argument("DenseTensor: data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_to_string(shape_));
    }

    static DenseTensor constant(Shape shape, Scalar value) {
        DenseTensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    Index order() const { return static_cast<Index>(shape_.size()); }
    const Shape& shape() const { return shape_; }
    Index dim(Index mode) const { return shape_.at(static_cast<std::size_t>(mode)); }
    Index size() const { return static_cast<Index>(data_.size()); }

    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }

    Scalar& operator[](Index flat) { return data_[static_cast<std::size_t>(flat)]; }
    const Scalar& operator[](Index flat) const { return data_[static_cast<std::size_t>(flat)]; }

    template <typename... Ix>
    Scalar& operator()(Ix... indices) {
        return data_[static_cast<std::size_t>(flat_index({static_cast<Index>(indices)...}))];
    }
    template <typename... Ix>
    const Scalar& operator()(Ix... indices) const {
        return data_[static_cast<std::size_t>(flat_index({static_cast<Index>(indices)...}))];
    }

    Index flat_index(std::initializer_list<Index> indices) const {
        if (static_cast<Index>(indices.size()) != order())
            throw std::invalid_argument("DenseTensor: expected " + std::to_string(order()) +
                                        " indices, got " + std::to_string(indices.size()));
        Index flat = 0;
        Index k = 0;
        for (Index i : indices) {
            if (i < 0 || i >= shape_[static_cast<std::size_t>(k)])
                throw std::out_of_range("DenseTensor: index " + std::to_string(i) +
                                        " out of range for mode " + std::to_string(k));
            flat = flat * shape_[static_cast<std::size_t>(k)] + i;
            ++k;
        }
        return flat;
    }

    // Flat views for Eigen expressions.
    Eigen::Map<Vector<Scalar>> vec() { return {data_.data(), size()}; }
    Eigen::Map<const Vector<Scalar>> vec() const { return {data_.data(), size()}; }

    bool same_shape(const DenseTensor& other) const { return shape_ == other.shape_; }

    DenseTensor& operator+=(const DenseTensor& other) {
        require_same_shape(other, "+=");
        vec() += other.vec();
        return *this;
    }
    DenseTensor& operator-=(const DenseTensor& other) {
        require_same_shape(other, "-=");
        vec() -= other.vec();
        return *this;
    }
    DenseTensor& operator*=(Scalar s) {
        vec() *= s;
        return *this;
    }

    void set_zero() { std::fill(data_.begin(), data_.end(), Scalar(0)); }

    DenseTensor reshaped(Shape new_shape) const {
        if (shape_size(new_shape) != size())
            throw std::invalid_argument("DenseTensor: reshape " + shape_to_string(shape_) + " -> " +
                                        shape_to_string(new_shape) + " changes element count");
        return DenseTensor(std::move(new_shape), data_);
    }

private:
    static void validate_shape(const Shape& shape) {
        for (Index d : shape)
            if (d <= 0)
                throw std::invalid_argument("DenseTensor: non-positive dimension in shape " +
                                            shape_to_string(shape));
    }

    void require_same_shape(const DenseTensor& other, const char* op) const {
        if (!same_shape(other))
            throw std::invalid_argument(std::string("DenseTensor: shape mismatch in ") + op + ": " +
                                        shape_to_string(shape_) + " vs " + shape_to_string(other.shape_));
    }

    Shape shape_;
    std::vector<Scalar> data_;
};

using Tensord = DenseTensor<double>;

template <typename Scalar>
DenseTensor<Scalar> operator+(DenseTensor<Scalar> a, const DenseTensor<Scalar>& b) {
    a += b;
    return a;
}

template <typename Scalar>
DenseTensor<Scalar> operator-(DenseTensor<Scalar> a, const DenseTensor<Scalar>& b) {
    a -= b;
    return a;
}

template <typename Scalar>
DenseTensor<Scalar> operator*(Scalar s, DenseTensor<Scalar> t) {
    t *= s;
    return t;
}

}  // namespace deften
