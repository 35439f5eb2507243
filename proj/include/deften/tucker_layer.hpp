#pragma once

#include "deften/conv.hpp"
#include "deften/tucker.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace deften {

// A convolution kernel stored in Tucker form, with a keep probability theta
// controlling Bernoulli dropout of latent core entries. Kernels are always
// 4-order (filters, channels, height, width); 1-d convolutions use height 1.
template <typename Scalar>
struct TuckerConvLayer {
    TuckerFactors<Scalar> factors;
    double theta = 1.0;
    bool rescale = false;  // multiply surviving core entries by theta^-4
    ConvMeta conv;

    Shape kernel_shape() const { return factors.original_shape(); }
};

// One 0/1 keep vector per mode, each as long as the corresponding core rank.
// Viewed as diagonal matrices these are idempotent and symmetric, which is
// what lets factor-side masking collapse onto the core (see
// randomized_weight_reference). `seed` reproduces the draw exactly.
struct DropoutMasks {
    std::vector<std::vector<int>> lambdas;
    std::uint64_t seed = 0;
};

enum class LayerMode {
    Deterministic,  // ignore theta, use the full reconstruction
    Randomized,     // fresh masks on every weight materialization
    Replay,         // caller-supplied masks
};

inline DropoutMasks sample_masks(const Shape& ranks, double theta, std::uint64_t seed) {
    if (!(theta >= 0.0 && theta <= 1.0))
        throw std::invalid_argument("sample_masks: theta " + std::to_string(theta) +
                                    " outside [0, 1]");
    DropoutMasks masks;
    masks.seed = seed;
    Rng rng(seed);
    masks.lambdas.reserve(ranks.size());
    for (Index r : ranks) {
        std::vector<int> lambda(static_cast<std::size_t>(r));
        for (int& bit : lambda) bit = rng.bernoulli(theta) ? 1 : 0;
        masks.lambdas.push_back(std::move(lambda));
    }
    return masks;
}

namespace detail {

template <typename Scalar>
void validate_masks(const TuckerConvLayer<Scalar>& layer, const DropoutMasks& masks) {
    const Shape ranks = layer.factors.ranks();
    if (masks.lambdas.size() != ranks.size())
        throw std::invalid_argument("dropout masks: " + std::to_string(masks.lambdas.size()) +
                                    " mask vectors for " + std::to_string(ranks.size()) + " modes");
    for (std::size_t n = 0; n < ranks.size(); ++n) {
        if (static_cast<Index>(masks.lambdas[n].size()) != ranks[n])
            throw std::invalid_argument("dropout masks: length " +
                                        std::to_string(masks.lambdas[n].size()) + " at mode " +
                                        std::to_string(n) + ", core rank is " +
                                        std::to_string(ranks[n]));
        for (int bit : masks.lambdas[n])
            if (bit != 0 && bit != 1)
                throw std::invalid_argument("dropout masks: entries must be 0 or 1");
    }
}

}  // namespace detail

// Per-entry multiplier for a core of the given ranks: 0 where any mode's keep
// bit is 0, `survivor` everywhere else. This same tensor multiplies the core
// gradient on the backward pass, so it is exposed rather than buried in
// randomized_weight.
template <typename Scalar>
DenseTensor<Scalar> core_mask_scale(const Shape& ranks, const DropoutMasks& masks,
                                    Scalar survivor) {
    if (masks.lambdas.size() != ranks.size())
        throw std::invalid_argument("core_mask_scale: " + std::to_string(masks.lambdas.size()) +
                                    " mask vectors for " + std::to_string(ranks.size()) + " modes");
    for (std::size_t n = 0; n < ranks.size(); ++n) {
        if (static_cast<Index>(masks.lambdas[n].size()) != ranks[n])
            throw std::invalid_argument("core_mask_scale: mask length mismatch at mode " +
                                        std::to_string(n));
        for (int bit : masks.lambdas[n])
            if (bit != 0 && bit != 1)
                throw std::invalid_argument("core_mask_scale: entries must be 0 or 1");
    }
    DenseTensor<Scalar> scale(ranks);
    std::vector<Index> idx(ranks.size(), 0);
    for (Index flat = 0; flat < scale.size(); ++flat) {
        bool kept = true;
        for (std::size_t n = 0; n < ranks.size() && kept; ++n)
            kept = masks.lambdas[n][static_cast<std::size_t>(idx[n])] == 1;
        scale[flat] = kept ? survivor : Scalar(0);
        for (std::size_t n = ranks.size(); n-- > 0;) {
            if (++idx[n] < ranks[n]) break;
            idx[n] = 0;
        }
    }
    return scale;
}

template <typename Scalar>
DenseTensor<Scalar> core_mask_scale(const TuckerConvLayer<Scalar>& layer,
                                    const DropoutMasks& masks) {
    detail::validate_masks(layer, masks);
    const Shape ranks = layer.factors.ranks();
    const Scalar survivor =
        layer.rescale ? static_cast<Scalar>(std::pow(layer.theta, -static_cast<double>(ranks.size())))
                      : Scalar(1);
    return core_mask_scale(ranks, masks, survivor);
}

// Dropout applied in the latent space: zero the masked core entries and expand
// through the *original* factors. The reconstructed kernel stays dense; only
// its latent representation is sparsified.
template <typename Scalar>
DenseTensor<Scalar> randomized_weight(const TuckerConvLayer<Scalar>& layer,
                                      const DropoutMasks& masks) {
    const TuckerFactors<Scalar> masked{hadamard(layer.factors.core, core_mask_scale(layer, masks)),
                                       layer.factors.factors};
    return tucker_reconstruct(masked);
}

// Literal masked-factor evaluation: contract the core with diag(lambda) on
// every mode, then expand through U * diag(lambda)^T. Algebraically identical
// to randomized_weight because the diagonal masks are idempotent; kept only as
// a cross-check oracle — the production path never materializes these
// contractions.
template <typename Scalar>
DenseTensor<Scalar> randomized_weight_reference(const TuckerConvLayer<Scalar>& layer,
                                                const DropoutMasks& masks) {
    detail::validate_masks(layer, masks);
    const Shape ranks = layer.factors.ranks();
    DenseTensor<Scalar> core = layer.factors.core;
    std::vector<Matrix<Scalar>> masked_factors;
    for (std::size_t n = 0; n < ranks.size(); ++n) {
        Matrix<Scalar> m = Matrix<Scalar>::Zero(ranks[n], ranks[n]);
        for (Index r = 0; r < ranks[n]; ++r)
            m(r, r) = static_cast<Scalar>(masks.lambdas[n][static_cast<std::size_t>(r)]);
        core = mode_product(core, m, static_cast<Index>(n));
        masked_factors.push_back(layer.factors.factors[n] * m.transpose());
    }
    if (layer.rescale)
        core *= static_cast<Scalar>(std::pow(layer.theta, -static_cast<double>(ranks.size())));
    DenseTensor<Scalar> out = core;
    for (std::size_t n = 0; n < masked_factors.size(); ++n)
        out = mode_product(out, masked_factors[n], static_cast<Index>(n));
    return out;
}

// The kernel actually used by a forward pass. Randomized mode consumes one
// seed from the caller's stream per call, and reports the drawn masks through
// `drawn` so callers can replay or log them.
template <typename Scalar>
DenseTensor<Scalar> effective_weight(const TuckerConvLayer<Scalar>& layer, LayerMode mode,
                                     Rng* rng = nullptr, const DropoutMasks* replay = nullptr,
                                     DropoutMasks* drawn = nullptr) {
    switch (mode) {
        case LayerMode::Deterministic:
            return tucker_reconstruct(layer.factors);
        case LayerMode::Randomized: {
            if (!rng)
                throw std::invalid_argument("effective_weight: Randomized mode needs an rng");
            const DropoutMasks masks =
                sample_masks(layer.factors.ranks(), layer.theta, rng->next_seed());
            if (drawn) *drawn = masks;
            return randomized_weight(layer, masks);
        }
        case LayerMode::Replay:
            if (!replay)
                throw std::invalid_argument("effective_weight: Replay mode needs masks");
            return randomized_weight(layer, *replay);
    }
    throw std::logic_error("effective_weight: unhandled mode");
}

template <typename Scalar>
TuckerConvLayer<Scalar> init_from_dense(const DenseTensor<Scalar>& w, const Shape& ranks,
                                        double theta, ConvMeta conv = {}, bool rescale = false) {
    if (w.order() != 4)
        throw std::invalid_argument("init_from_dense: kernel must be 4-order, got order " +
                                    std::to_string(w.order()));
    if (!(theta >= 0.0 && theta <= 1.0))
        throw std::invalid_argument("init_from_dense: theta outside [0, 1]");
    DecompositionOptions opts;
    opts.ranks = ranks;
    TuckerConvLayer<Scalar> layer;
    layer.factors = tucker_decompose(w, opts);
    layer.theta = theta;
    layer.rescale = rescale;
    layer.conv = conv;
    return layer;
}

// Matrix special case: only the filter mode is factorized; channel and spatial
// modes carry identity factors at full rank, so the core is (R_F, C, H, W).
template <typename Scalar>
TuckerConvLayer<Scalar> init_matrix_from_dense(const DenseTensor<Scalar>& w, Index rank_f,
                                               double theta, ConvMeta conv = {},
                                               bool rescale = false) {
    if (w.order() != 4)
        throw std::invalid_argument("init_matrix_from_dense: kernel must be 4-order");
    if (rank_f < 1 || rank_f > w.dim(0))
        throw std::invalid_argument("init_matrix_from_dense: rank " + std::to_string(rank_f) +
                                    " out of [1, " + std::to_string(w.dim(0)) + "]");
    TuckerConvLayer<Scalar> layer;
    layer.factors.factors.resize(4);
    layer.factors.factors[0] = detail::leading_left_singular_vectors(unfold(w, 0), rank_f);
    for (Index n = 1; n < 4; ++n)
        layer.factors.factors[static_cast<std::size_t>(n)] =
            Matrix<Scalar>::Identity(w.dim(n), w.dim(n));
    layer.factors.core =
        mode_product(w, Matrix<Scalar>(layer.factors.factors[0].transpose()), 0);
    layer.theta = theta;
    layer.rescale = rescale;
    layer.conv = conv;
    return layer;
}

template <typename Scalar>
bool is_matrix_configured(const TuckerConvLayer<Scalar>& layer) {
    if (layer.factors.factors.size() != 4) return false;
    for (std::size_t n = 1; n < 4; ++n) {
        const Matrix<Scalar>& u = layer.factors.factors[n];
        if (u.rows() != u.cols()) return false;
        if ((u - Matrix<Scalar>::Identity(u.rows(), u.cols())).cwiseAbs().maxCoeff() > 1e-12)
            return false;
    }
    return true;
}

// Filter-mode-only dropout computed as a masked matrix product on the mode-0
// unfolding. Only valid for matrix-configured layers; agrees with
// randomized_weight given masks (lambda_f, ones, ones, ones).
template <typename Scalar>
DenseTensor<Scalar> matrixized_weight(const TuckerConvLayer<Scalar>& layer,
                                      const std::vector<int>& lambda_f) {
    if (!is_matrix_configured(layer))
        throw std::invalid_argument("matrixized_weight: layer is not matrix-configured");
    const Index rank_f = layer.factors.core.dim(0);
    if (static_cast<Index>(lambda_f.size()) != rank_f)
        throw std::invalid_argument("matrixized_weight: mask length " +
                                    std::to_string(lambda_f.size()) + ", filter rank is " +
                                    std::to_string(rank_f));
    const Scalar survivor =
        layer.rescale ? static_cast<Scalar>(std::pow(layer.theta, -4.0)) : Scalar(1);
    Matrix<Scalar> rows = unfold(layer.factors.core, 0);
    for (Index r = 0; r < rank_f; ++r) {
        if (lambda_f[static_cast<std::size_t>(r)] == 1)
            rows.row(r) *= survivor;
        else
            rows.row(r).setZero();
    }
    Shape out_shape = layer.factors.core.shape();
    out_shape[0] = layer.factors.factors[0].rows();
    return fold(Matrix<Scalar>(layer.factors.factors[0] * rows), 0, out_shape);
}

}  // namespace deften
