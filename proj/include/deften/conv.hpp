#pragma once

#include "deften/tensor.hpp"

namespace deften {

struct ConvMeta {
    Index stride_h = 1, stride_w = 1;
    Index pad_h = 0, pad_w = 0;
};

inline Index conv_output_extent(Index in, Index kernel, Index stride, Index pad) {
    if (stride < 1) throw std::invalid_argument("conv: stride must be >= 1");
    if (kernel < 1) throw std::invalid_argument("conv: kernel must be >= 1");
    if (kernel > in + 2 * pad)
        throw std::invalid_argument("conv: kernel " + std::to_string(kernel) +
                                    " larger than padded input " + std::to_string(in + 2 * pad));
    return (in + 2 * pad - kernel) / stride + 1;
}

// Patch matrix of a (C, h, w) input: one column per output position, rows
// ordered like the row-major flat order of a (C, kh, kw) kernel. Out-of-bounds
// taps read as zero (zero padding).
template <typename Scalar>
Matrix<Scalar> im2col(const DenseTensor<Scalar>& input, Index kh, Index kw, const ConvMeta& meta) {
    if (input.order() != 3)
        throw std::invalid_argument("im2col: input must be (channels, height, width)");
    const Index c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const Index h_out = conv_output_extent(h, kh, meta.stride_h, meta.pad_h);
    const Index w_out = conv_output_extent(w, kw, meta.stride_w, meta.pad_w);
    Matrix<Scalar> cols = Matrix<Scalar>::Zero(c * kh * kw, h_out * w_out);
    for (Index oh = 0; oh < h_out; ++oh)
        for (Index ow = 0; ow < w_out; ++ow) {
            const Index col = oh * w_out + ow;
            for (Index ch = 0; ch < c; ++ch)
                for (Index ki = 0; ki < kh; ++ki) {
                    const Index ih = oh * meta.stride_h - meta.pad_h + ki;
                    if (ih < 0 || ih >= h) continue;
                    for (Index kj = 0; kj < kw; ++kj) {
                        const Index iw = ow * meta.stride_w - meta.pad_w + kj;
                        if (iw < 0 || iw >= w) continue;
                        cols((ch * kh + ki) * kw + kj, col) = input(ch, ih, iw);
                    }
                }
        }
    return cols;
}

// Adjoint of im2col: scatter-adds patch columns back onto the input grid.
// Positions a patch read more than once accumulate, which is exactly what the
// convolution input gradient needs.
template <typename Scalar>
DenseTensor<Scalar> col2im(const Matrix<Scalar>& cols, const Shape& input_shape, Index kh, Index kw,
                           const ConvMeta& meta) {
    if (input_shape.size() != 3)
        throw std::invalid_argument("col2im: target must be (channels, height, width)");
    const Index c = input_shape[0], h = input_shape[1], w = input_shape[2];
    const Index h_out = conv_output_extent(h, kh, meta.stride_h, meta.pad_h);
    const Index w_out = conv_output_extent(w, kw, meta.stride_w, meta.pad_w);
    if (cols.rows() != c * kh * kw || cols.cols() != h_out * w_out)
        throw std::invalid_argument("col2im: patch matrix shape mismatch");
    DenseTensor<Scalar> out(input_shape);
    for (Index oh = 0; oh < h_out; ++oh)
        for (Index ow = 0; ow < w_out; ++ow) {
            const Index col = oh * w_out + ow;
            for (Index ch = 0; ch < c; ++ch)
                for (Index ki = 0; ki < kh; ++ki) {
                    const Index ih = oh * meta.stride_h - meta.pad_h + ki;
                    if (ih < 0 || ih >= h) continue;
                    for (Index kj = 0; kj < kw; ++kj) {
                        const Index iw = ow * meta.stride_w - meta.pad_w + kj;
                        if (iw < 0 || iw >= w) continue;
                        out(ch, ih, iw) += cols((ch * kh + ki) * kw + kj, col);
                    }
                }
        }
    return out;
}

// Single-sample convolution: (C, h, w) input, (F, C, kh, kw) kernel,
// (F, h_out, w_out) output, via the patch matrix and one GEMM.
template <typename Scalar>
DenseTensor<Scalar> conv2d(const DenseTensor<Scalar>& input, const DenseTensor<Scalar>& kernel,
                           const ConvMeta& meta) {
    if (kernel.order() != 4)
        throw std::invalid_argument("conv2d: kernel must be (filters, channels, kh, kw)");
    if (input.order() != 3 || input.dim(0) != kernel.dim(1))
        throw std::invalid_argument("conv2d: input channels " +
                                    (input.order() == 3 ? std::to_string(input.dim(0)) : "?") +
                                    " do not match kernel channels " + std::to_string(kernel.dim(1)));
    const Index f = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const Index h_out = conv_output_extent(input.dim(1), kh, meta.stride_h, meta.pad_h);
    const Index w_out = conv_output_extent(input.dim(2), kw, meta.stride_w, meta.pad_w);

    using RowMajor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMajor> wmat(kernel.data(), f, kernel.size() / f);
    const Matrix<Scalar> patches = im2col(input, kh, kw, meta);

    DenseTensor<Scalar> y({f, h_out, w_out});
    Eigen::Map<RowMajor> ymat(y.data(), f, h_out * w_out);
    ymat.noalias() = wmat * patches;
    return y;
}

}  // namespace deften
