#pragma once

#include "deften/rng.hpp"
#include "deften/tensor_ops.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <string>
#include <vector>

namespace deften {

// Tucker form of a tensor: a core of shape `ranks` plus one column-orthonormal
// factor per mode (factors[n] is dim_n x rank_n).
template <typename Scalar>
struct TuckerFactors {
    DenseTensor<Scalar> core;
    std::vector<Matrix<Scalar>> factors;

    Shape ranks() const { return core.shape(); }

    Shape original_shape() const {
        Shape s(factors.size());
        for (std::size_t n = 0; n < factors.size(); ++n) s[n] = factors[n].rows();
        return s;
    }
};

enum class TuckerInit { Hosvd, Random };

struct DecompositionOptions {
    Shape ranks;                 // empty -> default_tucker_ranks of the input
    int max_iterations = 25;     // HOOI sweeps after init; 0 keeps the init
    double tolerance = 1e-10;    // stop when a sweep improves the error less than this
    TuckerInit init = TuckerInit::Hosvd;
    std::uint64_t seed = 0;      // used only for Random init
};

struct DecompositionReport {
    double initial_error = 0.0;        // relative error right after init
    std::vector<double> sweep_errors;  // relative error after each HOOI sweep
};

inline Shape default_tucker_ranks(const Shape& shape) {
    Shape ranks(shape.size());
    for (std::size_t n = 0; n < shape.size(); ++n) ranks[n] = (shape[n] + 1) / 2;
    return ranks;
}

namespace detail {

template <typename Scalar>
void validate_ranks(const Shape& ranks, const DenseTensor<Scalar>& t) {
    if (static_cast<Index>(ranks.size()) != t.order())
        throw std::invalid_argument("tucker_decompose: " + std::to_string(ranks.size()) +
                                    " ranks for an order-" + std::to_string(t.order()) + " tensor");
    for (Index n = 0; n < t.order(); ++n) {
        const Index r = ranks[static_cast<std::size_t>(n)];
        if (r < 1 || r > t.dim(n))
            throw std::invalid_argument("tucker_decompose: rank " + std::to_string(r) +
                                        " out of [1, " + std::to_string(t.dim(n)) +
                                        "] at mode " + std::to_string(n));
    }
}

// Leading `rank` left singular vectors of m. Full U so that ranks up to
// m.rows() stay available even when the unfolding is wide and rank-deficient.
template <typename Scalar>
Matrix<Scalar> leading_left_singular_vectors(const Matrix<Scalar>& m, Index rank) {
    Eigen::BDCSVD<Matrix<Scalar>> svd(m, Eigen::ComputeFullU);
    return svd.matrixU().leftCols(rank);
}

template <typename Scalar>
Matrix<Scalar> random_orthonormal(Index rows, Index cols, Rng& rng) {
    Matrix<Scalar> g(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) g(i, j) = static_cast<Scalar>(rng.normal());
    Eigen::HouseholderQR<Matrix<Scalar>> qr(g);
    return qr.householderQ() * Matrix<Scalar>::Identity(rows, cols);
}

// t contracted with the transpose of every factor except `skip` (-1 for none).
template <typename Scalar>
DenseTensor<Scalar> project_onto_factors(const DenseTensor<Scalar>& t,
                                         const std::vector<Matrix<Scalar>>& factors,
                                         Index skip) {
    DenseTensor<Scalar> out = t;
    for (Index n = 0; n < t.order(); ++n) {
        if (n == skip) continue;
        out = mode_product(out, Matrix<Scalar>(factors[static_cast<std::size_t>(n)].transpose()), n);
    }
    return out;
}

}  // namespace detail

template <typename Scalar>
DenseTensor<Scalar> tucker_reconstruct(const TuckerFactors<Scalar>& f) {
    DenseTensor<Scalar> out = f.core;
    for (Index n = 0; n < f.core.order(); ++n)
        out = mode_product(out, f.factors[static_cast<std::size_t>(n)], n);
    return out;
}

// Higher-order orthogonal iteration: HOSVD (or random orthonormal) init, then
// alternating sweeps that re-fit each factor against the others. Each sweep's
// relative reconstruction error is non-increasing.
template <typename Scalar>
TuckerFactors<Scalar> tucker_decompose(const DenseTensor<Scalar>& t,
                                       const DecompositionOptions& opts = {},
                                       DecompositionReport* report = nullptr) {
    Shape ranks = opts.ranks.empty() ? default_tucker_ranks(t.shape()) : opts.ranks;
    detail::validate_ranks(ranks, t);

    std::vector<Matrix<Scalar>> factors(static_cast<std::size_t>(t.order()));
    if (opts.init == TuckerInit::Hosvd) {
        for (Index n = 0; n < t.order(); ++n)
            factors[static_cast<std::size_t>(n)] =
                detail::leading_left_singular_vectors(unfold(t, n), ranks[static_cast<std::size_t>(n)]);
    } else {
        Rng rng(opts.seed);
        for (Index n = 0; n < t.order(); ++n)
            factors[static_cast<std::size_t>(n)] =
                detail::random_orthonormal<Scalar>(t.dim(n), ranks[static_cast<std::size_t>(n)], rng);
    }

    TuckerFactors<Scalar> result{detail::project_onto_factors(t, factors, -1), std::move(factors)};
    double error = relative_error(t, tucker_reconstruct(result));
    if (report) {
        report->initial_error = error;
        report->sweep_errors.clear();
    }

    for (int sweep = 0; sweep < opts.max_iterations; ++sweep) {
        for (Index n = 0; n < t.order(); ++n) {
            DenseTensor<Scalar> partial = detail::project_onto_factors(t, result.factors, n);
            result.factors[static_cast<std::size_t>(n)] = detail::leading_left_singular_vectors(
                unfold(partial, n), ranks[static_cast<std::size_t>(n)]);
        }
        result.core = detail::project_onto_factors(t, result.factors, -1);
        const double next = relative_error(t, tucker_reconstruct(result));
        if (report) report->sweep_errors.push_back(next);
        const bool converged = error - next < opts.tolerance;
        error = next;
        if (converged) break;
    }
    return result;
}

}  // namespace deften
