#pragma once

#include "deften/conv.hpp"

#include <cmath>
#include <utility>

namespace deften {

// sgn with the zero case pinned: sgn(0) := +1, so sign tensors contain only
// {-1, +1} and the binary arithmetic below never sees a zero weight.
inline double sign_pos(double x) { return x < 0.0 ? -1.0 : 1.0; }

template <typename Scalar>
DenseTensor<Scalar> sign_tensor(const DenseTensor<Scalar>& t) {
    DenseTensor<Scalar> s(t.shape());
    for (Index i = 0; i < t.size(); ++i) s[i] = static_cast<Scalar>(sign_pos(t[i]));
    return s;
}

enum class SteVariant { ClippedIdentity, Tanh, TanhScaled };

// Backward surrogate for d sgn(x)/dx. Used identically for training and for
// attack gradients, so the attacker's strength depends on which variant the
// model was built with.
inline double ste_derivative(double x, SteVariant variant) {
    switch (variant) {
        case SteVariant::ClippedIdentity:
            return std::abs(x) <= 1.0 ? 1.0 : 0.0;
        case SteVariant::Tanh: {
            const double t = std::tanh(x);
            return 1.0 - t * t;
        }
        case SteVariant::TanhScaled: {
            const double t = std::tanh(0.75 * x);
            return 0.75 * (1.0 - t * t);
        }
    }
    throw std::logic_error("ste_derivative: unhandled variant");
}

// Smooth stand-in for sgn whose exact derivative is ste_derivative. Swapping
// sgn for this makes a binary layer differentiable end to end, which is how
// the gradient checks validate the backward pass.
inline double ste_surrogate(double x, SteVariant variant) {
    switch (variant) {
        case SteVariant::ClippedIdentity:
            return std::clamp(x, -1.0, 1.0);
        case SteVariant::Tanh:
            return std::tanh(x);
        case SteVariant::TanhScaled:
            return std::tanh(0.75 * x);
    }
    throw std::logic_error("ste_surrogate: unhandled variant");
}

// Everything a binarized convolution needs besides the raw input: the sign
// kernel, the per-filter weight scale alpha, and the per-location input scale
// K (which depends on the input, so it is filled in per forward pass).
template <typename Scalar>
struct BinaryConvState {
    DenseTensor<Scalar> sign_weight;  // (F, C, kh, kw), entries in {-1, +1}
    Vector<Scalar> alpha;             // length F
    DenseTensor<Scalar> k_map;        // (1, h_out, w_out)
};

// alpha[f] = mean |w[f]|, the closed-form minimizer of ||w_f - a * sgn(w_f)||^2
// over a.
template <typename Scalar>
BinaryConvState<Scalar> binarize_weight(const DenseTensor<Scalar>& w) {
    if (w.order() != 4)
        throw std::invalid_argument("binarize_weight: kernel must be (filters, channels, kh, kw)");
    BinaryConvState<Scalar> state;
    state.sign_weight = sign_tensor(w);
    const Index f = w.dim(0);
    const Index per_filter = w.size() / f;
    state.alpha.resize(f);
    for (Index i = 0; i < f; ++i) {
        Scalar acc = 0;
        for (Index j = 0; j < per_filter; ++j) acc += std::abs(w[i * per_filter + j]);
        state.alpha(i) = acc / static_cast<Scalar>(per_filter);
    }
    return state;
}

// K: box-filter average of the channel-mean |input| over each kernel window,
// so every output location is rescaled by the average input magnitude it saw.
template <typename Scalar>
DenseTensor<Scalar> compute_input_scale(const DenseTensor<Scalar>& input, Index kernel_h,
                                        Index kernel_w, const ConvMeta& meta) {
    if (input.order() != 3)
        throw std::invalid_argument("compute_input_scale: input must be (channels, height, width)");
    const Index c = input.dim(0), h = input.dim(1), w = input.dim(2);
    DenseTensor<Scalar> a({1, h, w});
    for (Index i = 0; i < h; ++i)
        for (Index j = 0; j < w; ++j) {
            Scalar acc = 0;
            for (Index ch = 0; ch < c; ++ch) acc += std::abs(input(ch, i, j));
            a(0, i, j) = acc / static_cast<Scalar>(c);
        }
    const DenseTensor<Scalar> box =
        DenseTensor<Scalar>::constant({1, 1, kernel_h, kernel_w},
                                      Scalar(1) / static_cast<Scalar>(kernel_h * kernel_w));
    return conv2d(a, box, meta);
}

// (sgn(input) conv sign_weight) * K * alpha[f]. The sign conv runs in float
// arithmetic; only the values are binary.
template <typename Scalar>
DenseTensor<Scalar> binary_conv_forward(const BinaryConvState<Scalar>& state,
                                        const DenseTensor<Scalar>& input, const ConvMeta& meta) {
    DenseTensor<Scalar> y = conv2d(sign_tensor(input), state.sign_weight, meta);
    const Index f = y.dim(0), h_out = y.dim(1), w_out = y.dim(2);
    if (state.k_map.shape() != Shape{1, h_out, w_out})
        throw std::invalid_argument("binary_conv_forward: k_map shape " +
                                    shape_to_string(state.k_map.shape()) + " does not match output " +
                                    shape_to_string({1, h_out, w_out}));
    if (state.alpha.size() != f)
        throw std::invalid_argument("binary_conv_forward: alpha length mismatch");
    for (Index i = 0; i < f; ++i)
        for (Index p = 0; p < h_out; ++p)
            for (Index q = 0; q < w_out; ++q) y(i, p, q) *= state.alpha(i) * state.k_map(0, p, q);
    return y;
}

// One-call form: binarize the kernel, derive K from this input, run the conv.
template <typename Scalar>
DenseTensor<Scalar> binary_conv(const DenseTensor<Scalar>& w, const DenseTensor<Scalar>& input,
                                const ConvMeta& meta) {
    BinaryConvState<Scalar> state = binarize_weight(w);
    state.k_map = compute_input_scale(input, w.dim(2), w.dim(3), meta);
    return binary_conv_forward(state, input, meta);
}

}  // namespace deften
