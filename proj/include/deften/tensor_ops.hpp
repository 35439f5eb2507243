#pragma once

#include "deften/tensor.hpp"

#include <cmath>
#include <utility>
#include <vector>

namespace deften {

namespace detail {

// Splits the flat row-major index space around `mode`: elements are addressed
// as (outer, i_mode, inner) with inner contiguous in memory.
inline std::pair<Index, Index> outer_inner_sizes(const Shape& shape, Index mode) {
    Index outer = 1, inner = 1;
    for (Index k = 0; k < static_cast<Index>(shape.size()); ++k) {
        if (k < mode) outer *= shape[static_cast<std::size_t>(k)];
        if (k > mode) inner *= shape[static_cast<std::size_t>(k)];
    }
    return {outer, inner};
}

}  // namespace detail

// Mode-n unfolding: rows indexed by i_n, columns by the remaining indices in
// row-major order of the remaining dimensions (original order). This is the
// ordering for which fold(unfold(t, n), n, shape(t)) == t with row-major data.
template <typename Scalar>
Matrix<Scalar> unfold(const DenseTensor<Scalar>& t, Index mode) {
    if (mode < 0 || mode >= t.order())
        throw std::invalid_argument("unfold: mode " + std::to_string(mode) +
                                    " out of range for order " + std::to_string(t.order()));
    const Index dn = t.dim(mode);
    const auto [outer, inner] = detail::outer_inner_sizes(t.shape(), mode);
    Matrix<Scalar> m(dn, outer * inner);
    const Scalar* src = t.data();
    for (Index o = 0; o < outer; ++o)
        for (Index i = 0; i < dn; ++i) {
            const Scalar* run = src + (o * dn + i) * inner;
            for (Index j = 0; j < inner; ++j) m(i, o * inner + j) = run[j];
        }
    return m;
}

template <typename Scalar>
DenseTensor<Scalar> fold(const Matrix<Scalar>& m, Index mode, const Shape& target_shape) {
    if (mode < 0 || mode >= static_cast<Index>(target_shape.size()))
        throw std::invalid_argument("fold: mode " + std::to_string(mode) +
                                    " out of range for shape " + shape_to_string(target_shape));
    const Index dn = target_shape[static_cast<std::size_t>(mode)];
    const auto [outer, inner] = detail::outer_inner_sizes(target_shape, mode);
    if (m.rows() != dn || m.cols() != outer * inner)
        throw std::invalid_argument("fold: matrix " + std::to_string(m.rows()) + "x" +
                                    std::to_string(m.cols()) + " does not match shape " +
                                    shape_to_string(target_shape) + " at mode " + std::to_string(mode));
    DenseTensor<Scalar> t(target_shape);
    Scalar* dst = t.data();
    for (Index o = 0; o < outer; ++o)
        for (Index i = 0; i < dn; ++i) {
            Scalar* run = dst + (o * dn + i) * inner;
            for (Index j = 0; j < inner; ++j) run[j] = m(i, o * inner + j);
        }
    return t;
}

// n-mode product t x_n m: contracts mode n of t with the columns of m, so the
// output has m.rows() in place of t.shape[mode].
template <typename Scalar>
DenseTensor<Scalar> mode_product(const DenseTensor<Scalar>& t, const Matrix<Scalar>& m, Index mode) {
    if (mode < 0 || mode >= t.order())
        throw std::invalid_argument("mode_product: mode " + std::to_string(mode) +
                                    " out of range for order " + std::to_string(t.order()));
    if (m.cols() != t.dim(mode))
        throw std::invalid_argument("mode_product: matrix has " + std::to_string(m.cols()) +
                                    " columns, mode " + std::to_string(mode) + " has size " +
                                    std::to_string(t.dim(mode)));
    Shape out_shape = t.shape();
    out_shape[static_cast<std::size_t>(mode)] = m.rows();
    Matrix<Scalar> contracted = m * unfold(t, mode);
    return fold(contracted, mode, out_shape);
}

template <typename Scalar>
struct ModeApply {
    Matrix<Scalar> matrix;
    Index mode;
};

// Chained n-mode products over distinct modes. Result is independent of the
// application order; modes refer to the original tensor's modes.
template <typename Scalar>
DenseTensor<Scalar> multi_mode_product(const DenseTensor<Scalar>& t,
                                       const std::vector<ModeApply<Scalar>>& ops) {
    std::vector<bool> seen(static_cast<std::size_t>(t.order()), false);
    for (const auto& op : ops) {
        if (op.mode < 0 || op.mode >= t.order())
            throw std::invalid_argument("multi_mode_product: mode " + std::to_string(op.mode) +
                                        " out of range for order " + std::to_string(t.order()));
        if (seen[static_cast<std::size_t>(op.mode)])
            throw std::invalid_argument("multi_mode_product: repeated mode " + std::to_string(op.mode));
        seen[static_cast<std::size_t>(op.mode)] = true;
    }
    DenseTensor<Scalar> out = t;
    for (const auto& op : ops) out = mode_product(out, op.matrix, op.mode);
    return out;
}

template <typename Scalar>
DenseTensor<Scalar> hadamard(const DenseTensor<Scalar>& a, const DenseTensor<Scalar>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("hadamard: shape mismatch " + shape_to_string(a.shape()) +
                                    " vs " + shape_to_string(b.shape()));
    DenseTensor<Scalar> out = a;
    out.vec().array() *= b.vec().array();
    return out;
}

template <typename Scalar>
double frobenius_norm(const DenseTensor<Scalar>& t) {
    return t.vec().template cast<double>().norm();
}

// ||a - b||_F / ||a||_F. When a is all-zero the quotient degenerates; the
// convention here is to return ||b||_F, so 0/0 -> 0.
template <typename Scalar>
double relative_error(const DenseTensor<Scalar>& a, const DenseTensor<Scalar>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("relative_error: shape mismatch " + shape_to_string(a.shape()) +
                                    " vs " + shape_to_string(b.shape()));
    const double na = frobenius_norm(a);
    if (na == 0.0) return frobenius_norm(b);
    return (a.vec() - b.vec()).template cast<double>().norm() / na;
}

template <typename Scalar>
double max_abs_diff(const DenseTensor<Scalar>& a, const DenseTensor<Scalar>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("max_abs_diff: shape mismatch");
    if (a.size() == 0) return 0.0;
    return (a.vec() - b.vec()).cwiseAbs().maxCoeff();
}

}  // namespace deften
