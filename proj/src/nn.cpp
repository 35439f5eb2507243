#include "deften/nn.hpp"

#include "deften/tensor_ops.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace deften {
namespace nn_detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace {

Matrixd to_matrix(const Tensord& t) {
    if (t.order() != 2) throw std::invalid_argument("to_matrix: tensor is not 2-order");
    return Eigen::Map<const RowMajor>(t.data(), t.dim(0), t.dim(1));
}

Tensord from_matrix(const Matrixd& m) {
    Tensord t({m.rows(), m.cols()});
    Eigen::Map<RowMajor>(t.data(), m.rows(), m.cols()) = m;
    return t;
}

// d|t|/dt with the subgradient 0 at zero.
double abs_derivative(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

Tensord apply_sign(const Tensord& t, bool soft, SteVariant variant) {
    if (!soft) return sign_tensor(t);
    Tensord out(t.shape());
    for (Index i = 0; i < t.size(); ++i) out[i] = ste_surrogate(t[i], variant);
    return out;
}

}  // namespace

class Layer {
public:
    virtual ~Layer() = default;
    virtual Shape output_shape(const Shape& in) const = 0;
    virtual std::unique_ptr<LayerCtx> forward(const Tensord& x, Tensord& y,
                                              const ForwardOptions& opts, Rng* rng,
                                              Tape& tape) const = 0;
    virtual Tensord backward(const LayerCtx& ctx, const Tensord& dy, bool accum) = 0;
    virtual void collect(std::vector<Parameter*>& out) {}
    virtual void init(Rng& rng) {}
};

// ---------------------------------------------------------------------------
// Convolution (plain, tucker-dropout, binarized — and binarized-over-tucker)

class ConvLayer final : public Layer {
public:
    ConvLayer(const LayerSpec& spec, const ModelSpec& model, const Shape& input_shape,
              std::string name, Index tucker_index)
        : meta_(spec.meta),
          binarized_(spec.binarized),
          theta_(model.theta),
          rescale_(model.rescale),
          ste_(model.ste),
          tucker_index_(tucker_index) {
        kernel_shape_ = {spec.out_channels, input_shape[0], spec.kernel_h, spec.kernel_w};
        tucker_ = !spec.tucker_ranks.empty();
        if (tucker_) {
            ranks_ = spec.tucker_ranks;
            if (ranks_.size() != 4)
                throw std::invalid_argument(name + ": tucker ranks must have 4 entries");
            for (std::size_t n = 0; n < 4; ++n)
                if (ranks_[n] < 1 || ranks_[n] > kernel_shape_[n])
                    throw std::invalid_argument(name + ": tucker rank " + std::to_string(ranks_[n]) +
                                                " out of range for kernel " +
                                                shape_to_string(kernel_shape_));
            core_ = Parameter(name + ".core", ranks_);
            for (std::size_t n = 0; n < 4; ++n)
                factors_[n] = Parameter(name + ".factor" + std::to_string(n),
                                        {kernel_shape_[n], ranks_[n]});
        } else {
            kernel_ = Parameter(name + ".kernel", kernel_shape_);
        }
        bias_ = Parameter(name + ".bias", {spec.out_channels});
    }

    Shape output_shape(const Shape& in) const override {
        if (in.size() != 3 || in[0] != kernel_shape_[1])
            throw std::invalid_argument("conv: expected input (" + std::to_string(kernel_shape_[1]) +
                                        ", h, w), got " + shape_to_string(in));
        return {kernel_shape_[0],
                conv_output_extent(in[1], kernel_shape_[2], meta_.stride_h, meta_.pad_h),
                conv_output_extent(in[2], kernel_shape_[3], meta_.stride_w, meta_.pad_w)};
    }

    struct Ctx final : LayerCtx {
        Tensord x;
        Tensord dense_kernel;
        Matrixd patches;  // im2col of the conv's direct input (x, or its sign map)
        // tucker extras
        Tensord mask_scale;
        Tensord masked_core;
        // binary extras
        bool soft = false;
        Tensord s_x, s_w, z, k_map;
        Vectord alpha;
    };

    std::unique_ptr<LayerCtx> forward(const Tensord& x, Tensord& y, const ForwardOptions& opts,
                                      Rng* rng, Tape& tape) const override {
        auto ctx = std::make_unique<Ctx>();
        ctx->x = x;
        materialize_kernel(opts, rng, tape, *ctx);

        const Index f = kernel_shape_[0], kh = kernel_shape_[2], kw = kernel_shape_[3];
        if (binarized_) {
            ctx->soft = opts.soft_sign;
            // alpha and K always come from true magnitudes; only the sign maps
            // switch to the smooth surrogate in soft mode
            ctx->alpha = binarize_weight(ctx->dense_kernel).alpha;
            ctx->s_x = apply_sign(x, ctx->soft, ste_);
            ctx->s_w = apply_sign(ctx->dense_kernel, ctx->soft, ste_);
            ctx->k_map = compute_input_scale(x, kh, kw, meta_);
            ctx->patches = im2col(ctx->s_x, kh, kw, meta_);
            ctx->z = matmul_to_output(ctx->s_w, ctx->patches);
            y = ctx->z;
            for (Index i = 0; i < f; ++i)
                for (Index p = 0; p < y.dim(1); ++p)
                    for (Index q = 0; q < y.dim(2); ++q)
                        y(i, p, q) = y(i, p, q) * (ctx->alpha(i) * ctx->k_map(0, p, q)) +
                                     bias_.value[i];
        } else {
            ctx->patches = im2col(x, kh, kw, meta_);
            y = matmul_to_output(ctx->dense_kernel, ctx->patches);
            for (Index i = 0; i < f; ++i)
                for (Index p = 0; p < y.dim(1); ++p)
                    for (Index q = 0; q < y.dim(2); ++q) y(i, p, q) += bias_.value[i];
        }
        return ctx;
    }

    Tensord backward(const LayerCtx& base, const Tensord& dy, bool accum) override {
        const auto& ctx = static_cast<const Ctx&>(base);
        const Index f = kernel_shape_[0], kh = kernel_shape_[2], kw = kernel_shape_[3];
        const Index spatial = dy.size() / f;

        if (accum) {
            for (Index i = 0; i < f; ++i) {
                double acc = 0.0;
                for (Index s = 0; s < spatial; ++s) acc += dy[i * spatial + s];
                bias_.grad[i] += acc;
            }
        }

        Tensord dkernel(kernel_shape_);
        Tensord dx(ctx.x.shape());

        if (binarized_) {
            const Index h_out = dy.dim(1), w_out = dy.dim(2);
            // split dy across the three product terms: z, alpha, K
            Tensord dz(dy.shape());
            Vectord dalpha = Vectord::Zero(f);
            Tensord dk({1, h_out, w_out});
            for (Index i = 0; i < f; ++i)
                for (Index p = 0; p < h_out; ++p)
                    for (Index q = 0; q < w_out; ++q) {
                        const double g = dy(i, p, q);
                        dz(i, p, q) = g * ctx.alpha(i) * ctx.k_map(0, p, q);
                        dalpha(i) += g * ctx.k_map(0, p, q) * ctx.z(i, p, q);
                        dk(0, p, q) += g * ctx.alpha(i) * ctx.z(i, p, q);
                    }

            // sign-conv backward
            Eigen::Map<const RowMajor> dzmat(dz.data(), f, spatial);
            Eigen::Map<const RowMajor> swmat(ctx.s_w.data(), f, ctx.s_w.size() / f);
            const Matrixd dpatches = swmat.transpose() * dzmat;
            const Tensord ds_x = col2im(dpatches, ctx.x.shape(), kh, kw, meta_);

            // through the weight sign and the mean-magnitude alpha
            Eigen::Map<RowMajor> dkmat_w(dkernel.data(), f, dkernel.size() / f);
            dkmat_w = dzmat * ctx.patches.transpose();
            const Index per_filter = dkernel.size() / f;
            for (Index i = 0; i < f; ++i)
                for (Index j = 0; j < per_filter; ++j) {
                    const double w = ctx.dense_kernel[i * per_filter + j];
                    dkernel[i * per_filter + j] =
                        dkernel[i * per_filter + j] * ste_derivative(w, ste_) +
                        dalpha(i) * abs_derivative(w) / static_cast<double>(per_filter);
                }

            // through the input sign and the window-averaged magnitude map K
            const Index c = ctx.x.dim(0), h = ctx.x.dim(1), w = ctx.x.dim(2);
            Tensord da({h, w});
            for (Index p = 0; p < h_out; ++p)
                for (Index q = 0; q < w_out; ++q) {
                    const double g = dk(0, p, q) / static_cast<double>(kh * kw);
                    for (Index ki = 0; ki < kh; ++ki) {
                        const Index ih = p * meta_.stride_h - meta_.pad_h + ki;
                        if (ih < 0 || ih >= h) continue;
                        for (Index kj = 0; kj < kw; ++kj) {
                            const Index iw = q * meta_.stride_w - meta_.pad_w + kj;
                            if (iw < 0 || iw >= w) continue;
                            da(ih, iw) += g;
                        }
                    }
                }
            for (Index ch = 0; ch < c; ++ch)
                for (Index i = 0; i < h; ++i)
                    for (Index j = 0; j < w; ++j) {
                        const double xv = ctx.x(ch, i, j);
                        dx(ch, i, j) = ds_x(ch, i, j) * ste_derivative(xv, ste_) +
                                       da(i, j) * abs_derivative(xv) / static_cast<double>(c);
                    }
        } else {
            Eigen::Map<const RowMajor> dymat(dy.data(), f, spatial);
            Eigen::Map<const RowMajor> wmat(ctx.dense_kernel.data(), f,
                                            ctx.dense_kernel.size() / f);
            Eigen::Map<RowMajor> dkmat(dkernel.data(), f, dkernel.size() / f);
            dkmat = dymat * ctx.patches.transpose();
            const Matrixd dpatches = wmat.transpose() * dymat;
            dx = col2im(dpatches, ctx.x.shape(), kh, kw, meta_);
        }

        if (accum) kernel_backward(dkernel, ctx);
        return dx;
    }

    void collect(std::vector<Parameter*>& out) override {
        if (tucker_) {
            out.push_back(&core_);
            for (auto& u : factors_) out.push_back(&u);
        } else {
            out.push_back(&kernel_);
        }
        out.push_back(&bias_);
    }

    void init(Rng& rng) override {
        // He-style fan-in initialization of the dense kernel; the tucker
        // parametrization starts at the decomposition of that kernel.
        Tensord dense(kernel_shape_);
        const double stddev =
            std::sqrt(2.0 / static_cast<double>(kernel_shape_[1] * kernel_shape_[2] *
                                                kernel_shape_[3]));
        for (Index i = 0; i < dense.size(); ++i) dense[i] = stddev * rng.normal();
        if (tucker_) {
            DecompositionOptions opts;
            opts.ranks = ranks_;
            const TuckerFactors<double> f = tucker_decompose(dense, opts);
            core_.value = f.core;
            for (std::size_t n = 0; n < 4; ++n) factors_[n].value = from_matrix(f.factors[n]);
        } else {
            kernel_.value = dense;
        }
        bias_.value.set_zero();
    }

    bool is_tucker() const { return tucker_; }

private:
    Tensord matmul_to_output(const Tensord& kernel, const Matrixd& patches) const {
        const Index f = kernel_shape_[0];
        Eigen::Map<const RowMajor> wmat(kernel.data(), f, kernel.size() / f);
        Tensord y({f, out_h_, out_w_});
        Eigen::Map<RowMajor>(y.data(), f, patches.cols()) = wmat * patches;
        return y;
    }

    void materialize_kernel(const ForwardOptions& opts, Rng* rng, Tape& tape, Ctx& ctx) const {
        if (!tucker_) {
            ctx.dense_kernel = kernel_.value;
            return;
        }
        DropoutMasks masks;
        double survivor = 1.0;
        switch (opts.mode) {
            case LayerMode::Deterministic:
                for (Index r : ranks_) masks.lambdas.emplace_back(static_cast<std::size_t>(r), 1);
                break;
            case LayerMode::Randomized:
                if (!rng) throw std::invalid_argument("forward: Randomized mode needs an rng");
                masks = sample_masks(ranks_, theta_, rng->next_seed());
                survivor = rescale_ ? std::pow(theta_, -4.0) : 1.0;
                tape.drawn_masks.push_back(masks);
                break;
            case LayerMode::Replay:
                if (!opts.replay ||
                    static_cast<Index>(opts.replay->size()) <= tucker_index_)
                    throw std::invalid_argument("forward: Replay mode needs masks for every "
                                                "tucker conv");
                masks = (*opts.replay)[static_cast<std::size_t>(tucker_index_)];
                survivor = rescale_ ? std::pow(theta_, -4.0) : 1.0;
                break;
        }
        ctx.mask_scale = core_mask_scale<double>(ranks_, masks, survivor);
        ctx.masked_core = hadamard(core_.value, ctx.mask_scale);
        Tensord w = ctx.masked_core;
        for (Index n = 0; n < 4; ++n)
            w = mode_product(w, to_matrix(factors_[static_cast<std::size_t>(n)].value), n);
        ctx.dense_kernel = std::move(w);
    }

    void kernel_backward(const Tensord& dkernel, const Ctx& ctx) {
        if (!tucker_) {
            kernel_.grad += dkernel;
            return;
        }
        Matrixd u[4];
        for (std::size_t n = 0; n < 4; ++n) u[n] = to_matrix(factors_[n].value);

        // core: pull dkernel back through every factor, then re-mask
        Tensord dmasked = dkernel;
        for (Index n = 0; n < 4; ++n)
            dmasked = mode_product(dmasked, Matrixd(u[static_cast<std::size_t>(n)].transpose()), n);
        core_.grad += hadamard(dmasked, ctx.mask_scale);

        // factors: dU_n = unfold_n(dkernel) * unfold_n(partial_n)^T with the
        // masked core expanded through every other factor
        for (Index n = 0; n < 4; ++n) {
            Tensord partial = ctx.masked_core;
            for (Index m = 0; m < 4; ++m) {
                if (m == n) continue;
                partial = mode_product(partial, u[static_cast<std::size_t>(m)], m);
            }
            const Matrixd du = unfold(dkernel, n) * unfold(partial, n).transpose();
            factors_[static_cast<std::size_t>(n)].grad += from_matrix(du);
        }
    }

    friend class ::deften::Model;

    ConvMeta meta_;
    bool binarized_ = false;
    bool tucker_ = false;
    double theta_ = 1.0;
    bool rescale_ = false;
    SteVariant ste_ = SteVariant::ClippedIdentity;
    Index tucker_index_ = -1;
    Shape kernel_shape_;  // (F, C, kh, kw)
    Shape ranks_;
    Parameter kernel_, core_, bias_;
    Parameter factors_[4];
    // output extents fixed at model construction
    Index out_h_ = 0, out_w_ = 0;
};

// ---------------------------------------------------------------------------

class ReluLayer final : public Layer {
public:
    Shape output_shape(const Shape& in) const override { return in; }

    struct Ctx final : LayerCtx {
        Tensord x;
    };

    std::unique_ptr<LayerCtx> forward(const Tensord& x, Tensord& y, const ForwardOptions&,
                                      Rng*, Tape&) const override {
        auto ctx = std::make_unique<Ctx>();
        ctx->x = x;
        y = x;
        for (Index i = 0; i < y.size(); ++i) y[i] = std::max(0.0, y[i]);
        return ctx;
    }

    Tensord backward(const LayerCtx& base, const Tensord& dy, bool) override {
        const auto& ctx = static_cast<const Ctx&>(base);
        Tensord dx = dy;
        for (Index i = 0; i < dx.size(); ++i)
            if (ctx.x[i] <= 0.0) dx[i] = 0.0;
        return dx;
    }
};

class PoolLayer final : public Layer {
public:
    PoolLayer(Index ph, Index pw) : ph_(ph), pw_(pw) {
        if (ph < 1 || pw < 1) throw std::invalid_argument("pool: window must be at least 1x1");
    }

    Shape output_shape(const Shape& in) const override {
        if (in.size() != 3) throw std::invalid_argument("pool: expected (c, h, w) input");
        if (in[1] < ph_ || in[2] < pw_)
            throw std::invalid_argument("pool: window " + std::to_string(ph_) + "x" +
                                        std::to_string(pw_) + " larger than input " +
                                        shape_to_string(in));
        return {in[0], in[1] / ph_, in[2] / pw_};
    }

    struct Ctx final : LayerCtx {
        Shape in_shape;
        std::vector<Index> argmax;  // flat input index per output element
    };

    std::unique_ptr<LayerCtx> forward(const Tensord& x, Tensord& y, const ForwardOptions&,
                                      Rng*, Tape&) const override {
        const Shape out_shape = output_shape(x.shape());
        auto ctx = std::make_unique<Ctx>();
        ctx->in_shape = x.shape();
        y = Tensord(out_shape);
        ctx->argmax.resize(static_cast<std::size_t>(y.size()));
        Index out_flat = 0;
        for (Index c = 0; c < out_shape[0]; ++c)
            for (Index p = 0; p < out_shape[1]; ++p)
                for (Index q = 0; q < out_shape[2]; ++q, ++out_flat) {
                    // ties go to the first (lowest-index) maximum
                    double best = -std::numeric_limits<double>::infinity();
                    Index best_idx = -1;
                    for (Index i = 0; i < ph_; ++i)
                        for (Index j = 0; j < pw_; ++j) {
                            const double v = x(c, p * ph_ + i, q * pw_ + j);
                            if (v > best) {
                                best = v;
                                best_idx = x.flat_index({c, p * ph_ + i, q * pw_ + j});
                            }
                        }
                    y[out_flat] = best;
                    ctx->argmax[static_cast<std::size_t>(out_flat)] = best_idx;
                }
        return ctx;
    }

    Tensord backward(const LayerCtx& base, const Tensord& dy, bool) override {
        const auto& ctx = static_cast<const Ctx&>(base);
        Tensord dx(ctx.in_shape);
        for (Index o = 0; o < dy.size(); ++o) dx[ctx.argmax[static_cast<std::size_t>(o)]] += dy[o];
        return dx;
    }

private:
    Index ph_, pw_;
};

class FlattenLayer final : public Layer {
public:
    Shape output_shape(const Shape& in) const override { return {shape_size(in)}; }

    struct Ctx final : LayerCtx {
        Shape in_shape;
    };

    std::unique_ptr<LayerCtx> forward(const Tensord& x, Tensord& y, const ForwardOptions&,
                                      Rng*, Tape&) const override {
        auto ctx = std::make_unique<Ctx>();
        ctx->in_shape = x.shape();
        y = x.reshaped({x.size()});
        return ctx;
    }

    Tensord backward(const LayerCtx& base, const Tensord& dy, bool) override {
        return dy.reshaped(static_cast<const Ctx&>(base).in_shape);
    }
};

class LinearLayer final : public Layer {
public:
    LinearLayer(Index in, Index out, std::string name)
        : in_(in), out_(out),
          weight_(name + ".weight", {out, in}),
          bias_(name + ".bias", {out}) {}

    Shape output_shape(const Shape& in) const override {
        if (in.size() != 1 || in[0] != in_)
            throw std::invalid_argument("linear: expected input (" + std::to_string(in_) +
                                        "), got " + shape_to_string(in));
        return {out_};
    }

    struct Ctx final : LayerCtx {
        Tensord x;
    };

    std::unique_ptr<LayerCtx> forward(const Tensord& x, Tensord& y, const ForwardOptions&,
                                      Rng*, Tape&) const override {
        auto ctx = std::make_unique<Ctx>();
        ctx->x = x;
        y = Tensord({out_});
        Eigen::Map<const RowMajor> w(weight_.value.data(), out_, in_);
        Eigen::Map<Vectord> yv(y.data(), out_);
        yv = w * Eigen::Map<const Vectord>(x.data(), in_) +
             Eigen::Map<const Vectord>(bias_.value.data(), out_);
        return ctx;
    }

    Tensord backward(const LayerCtx& base, const Tensord& dy, bool accum) override {
        const auto& ctx = static_cast<const Ctx&>(base);
        Eigen::Map<const Vectord> dyv(dy.data(), out_);
        if (accum) {
            Eigen::Map<RowMajor> dw(weight_.grad.data(), out_, in_);
            dw += dyv * Eigen::Map<const Vectord>(ctx.x.data(), in_).transpose();
            Eigen::Map<Vectord>(bias_.grad.data(), out_) += dyv;
        }
        Tensord dx({in_});
        Eigen::Map<const RowMajor> w(weight_.value.data(), out_, in_);
        Eigen::Map<Vectord>(dx.data(), in_) = w.transpose() * dyv;
        return dx;
    }

    void collect(std::vector<Parameter*>& out) override {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    void init(Rng& rng) override {
        const double stddev = std::sqrt(2.0 / static_cast<double>(in_));
        for (Index i = 0; i < weight_.value.size(); ++i) weight_.value[i] = stddev * rng.normal();
        bias_.value.set_zero();
    }

private:
    Index in_, out_;
    Parameter weight_, bias_;
};

}  // namespace nn_detail

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
    if (spec_.input_shape.size() != 3)
        throw std::invalid_argument("model: input shape must be (channels, height, width)");
    if (spec_.classes < 1) throw std::invalid_argument("model: class count must be positive");
    if (!(spec_.theta >= 0.0 && spec_.theta <= 1.0))
        throw std::invalid_argument("model: theta outside [0, 1]");

    Shape shape = spec_.input_shape;
    Index tucker_count = 0;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        const LayerSpec& ls = spec_.layers[i];
        const std::string name = "layer" + std::to_string(i);
        std::unique_ptr<nn_detail::Layer> layer;
        switch (ls.type) {
            case LayerSpec::Type::Conv: {
                auto conv = std::make_unique<nn_detail::ConvLayer>(
                    ls, spec_, shape, name, ls.tucker_ranks.empty() ? Index(-1) : tucker_count);
                if (!ls.tucker_ranks.empty()) ++tucker_count;
                const Shape out = conv->output_shape(shape);
                conv->out_h_ = out[1];
                conv->out_w_ = out[2];
                layer = std::move(conv);
                break;
            }
            case LayerSpec::Type::Relu:
                layer = std::make_unique<nn_detail::ReluLayer>();
                break;
            case LayerSpec::Type::Pool:
                layer = std::make_unique<nn_detail::PoolLayer>(ls.pool_h, ls.pool_w);
                break;
            case LayerSpec::Type::Flatten:
                layer = std::make_unique<nn_detail::FlattenLayer>();
                break;
            case LayerSpec::Type::Linear: {
                if (shape.size() != 1)
                    throw std::invalid_argument(name + ": linear layer needs flattened input, got " +
                                                shape_to_string(shape));
                layer = std::make_unique<nn_detail::LinearLayer>(shape[0], ls.out_features, name);
                break;
            }
        }
        shape = layer->output_shape(shape);
        layers_.push_back(std::move(layer));
    }
    if (shape != Shape{spec_.classes})
        throw std::invalid_argument("model: network output " + shape_to_string(shape) +
                                    " does not match class count " + std::to_string(spec_.classes));
}

Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;
Model::~Model() = default;

void Model::init_params(std::uint64_t seed) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        layers_[i]->init(rng);
    }
}

Tape Model::forward(const Tensord& x, const ForwardOptions& opts, Rng* rng) const {
    if (x.shape() != spec_.input_shape)
        throw std::invalid_argument("forward: input " + shape_to_string(x.shape()) +
                                    " does not match model input " +
                                    shape_to_string(spec_.input_shape));
    Tape tape;
    Tensord cur = x;
    for (const auto& layer : layers_) {
        Tensord next;
        tape.ctxs.push_back(layer->forward(cur, next, opts, rng, tape));
        cur = std::move(next);
    }
    tape.logits = Eigen::Map<const Vectord>(cur.data(), cur.size());
    return tape;
}

Tensord Model::backward(Tape& tape, const Vectord& dlogits, bool accumulate_param_grads) {
    if (tape.consumed) throw std::logic_error("backward: tape already consumed");
    if (tape.ctxs.size() != layers_.size())
        throw std::invalid_argument("backward: tape does not belong to this model");
    tape.consumed = true;
    Tensord grad({dlogits.size()});
    Eigen::Map<Vectord>(grad.data(), grad.size()) = dlogits;
    for (std::size_t i = layers_.size(); i-- > 0;)
        grad = layers_[i]->backward(*tape.ctxs[i], grad, accumulate_param_grads);
    return grad;
}

std::vector<Parameter*> Model::parameters() {
    std::vector<Parameter*> out;
    for (auto& layer : layers_) layer->collect(out);
    return out;
}

std::vector<const Parameter*> Model::parameters() const {
    std::vector<const Parameter*> out;
    for (auto& layer : layers_) {
        std::vector<Parameter*> mut;
        layer->collect(mut);
        out.insert(out.end(), mut.begin(), mut.end());
    }
    return out;
}

Index Model::tucker_conv_count() const {
    Index count = 0;
    for (const auto& layer : layers_) {
        auto* conv = dynamic_cast<nn_detail::ConvLayer*>(layer.get());
        if (conv && conv->is_tucker()) ++count;
    }
    return count;
}

// ---------------------------------------------------------------------------
// Loss and optimizer

Index predict(const Model& model, const Tensord& x, const ForwardOptions& opts, Rng* rng) {
    const Tape tape = model.forward(x, opts, rng);
    Index best = 0;
    for (Index i = 1; i < tape.logits.size(); ++i)
        if (tape.logits(i) > tape.logits(best)) best = i;
    return best;
}

double cross_entropy(const Vectord& logits, Index label) {
    if (label < 0 || label >= logits.size())
        throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                    " out of range for " + std::to_string(logits.size()) +
                                    " classes");
    const double m = logits.maxCoeff();
    const double lse = std::log((logits.array() - m).exp().sum());
    return lse - (logits(label) - m);
}

Vectord cross_entropy_grad(const Vectord& logits, Index label) {
    if (label < 0 || label >= logits.size())
        throw std::invalid_argument("cross_entropy_grad: label out of range");
    const double m = logits.maxCoeff();
    Vectord p = (logits.array() - m).exp();
    p /= p.sum();
    p(label) -= 1.0;
    return p;
}

double learning_rate_at(const OptimizerConfig& config, Index epoch) {
    if (config.learning_rate <= 0.0 || config.drop_factor <= 0.0)
        throw std::invalid_argument("optimizer: rates must be positive");
    double lr = config.learning_rate;
    for (Index drop : config.drop_epochs)
        if (epoch >= drop) lr *= config.drop_factor;
    return lr;
}

void zero_grads(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) p->grad.set_zero();
}

void scale_grads(const std::vector<Parameter*>& params, double factor) {
    for (Parameter* p : params) p->grad *= factor;
}

void sgd_step(const std::vector<Parameter*>& params, const OptimizerConfig& config, Index epoch) {
    const double lr = learning_rate_at(config, epoch);
    for (Parameter* p : params) {
        p->momentum.vec() = config.momentum * p->momentum.vec() + p->grad.vec() +
                            config.weight_decay * p->value.vec();
        p->value.vec() -= lr * p->momentum.vec();
    }
}

// ---------------------------------------------------------------------------
// Named model builders

namespace {

Shape ranks_for(const Shape& kernel, const std::string& rule) {
    if (rule == "halve") return default_tucker_ranks(kernel);
    if (rule == "spatial-full")
        return {(kernel[0] + 1) / 2, (kernel[1] + 1) / 2, kernel[2], kernel[3]};
    throw std::invalid_argument("build_model: unknown rank rule '" + rule + "'");
}

// Applies the model-wide kernel-kind policy to one conv descriptor.
void apply_kernel_kind(LayerSpec& conv, const Shape& kernel_shape, const ModelOptions& options,
                       bool is_first_conv) {
    const bool keep_plain = options.first_conv_plain && is_first_conv;
    if (options.kernel_kind == "plain" || keep_plain) return;
    if (options.kernel_kind == "tucker") {
        conv.tucker_ranks = ranks_for(kernel_shape, options.rank_rule);
    } else if (options.kernel_kind == "binary") {
        conv.binarized = true;
        // defended binary nets put the tucker dropout under the binarization
        if (options.theta < 1.0) conv.tucker_ranks = ranks_for(kernel_shape, options.rank_rule);
    } else {
        throw std::invalid_argument("build_model: unknown kernel kind '" + options.kernel_kind +
                                    "'");
    }
}

LayerSpec conv_spec(Index out, Index kh, Index kw, Index sh, Index sw, Index ph, Index pw) {
    LayerSpec ls;
    ls.type = LayerSpec::Type::Conv;
    ls.out_channels = out;
    ls.kernel_h = kh;
    ls.kernel_w = kw;
    ls.meta = {sh, sw, ph, pw};
    return ls;
}

LayerSpec pool_spec(Index ph, Index pw) {
    LayerSpec ls;
    ls.type = LayerSpec::Type::Pool;
    ls.pool_h = ph;
    ls.pool_w = pw;
    return ls;
}

LayerSpec linear_spec(Index out) {
    LayerSpec ls;
    ls.type = LayerSpec::Type::Linear;
    ls.out_features = out;
    return ls;
}

LayerSpec plain_spec(LayerSpec::Type type) {
    LayerSpec ls;
    ls.type = type;
    return ls;
}

ModelSpec build_small_cnn(const ModelOptions& options) {
    ModelSpec spec;
    spec.input_shape = options.input_shape;
    spec.classes = options.classes;

    Index channels = options.input_shape[0];
    bool first = true;
    for (Index out : options.conv_channels) {
        LayerSpec conv = conv_spec(out, 3, 3, 1, 1, 1, 1);
        apply_kernel_kind(conv, {out, channels, 3, 3}, options, first);
        spec.layers.push_back(conv);
        spec.layers.push_back(plain_spec(LayerSpec::Type::Relu));
        spec.layers.push_back(pool_spec(2, 2));
        channels = out;
        first = false;
    }
    spec.layers.push_back(plain_spec(LayerSpec::Type::Flatten));
    spec.layers.push_back(linear_spec(options.hidden));
    spec.layers.push_back(plain_spec(LayerSpec::Type::Relu));
    spec.layers.push_back(linear_spec(options.classes));
    return spec;
}

// Like build_small_cnn but with no relu between conv blocks: a binarized conv
// computes sgn of its input, and post-relu activations are non-negative, so a
// preceding relu would collapse every sign to +1 and erase the input pattern.
// The sign itself supplies the block nonlinearity; relu survives in the head.
ModelSpec build_small_bnn(const ModelOptions& options) {
    ModelSpec spec;
    spec.input_shape = options.input_shape;
    spec.classes = options.classes;

    Index channels = options.input_shape[0];
    bool first = true;
    for (Index out : options.conv_channels) {
        LayerSpec conv = conv_spec(out, 3, 3, 1, 1, 1, 1);
        apply_kernel_kind(conv, {out, channels, 3, 3}, options, first);
        spec.layers.push_back(conv);
        spec.layers.push_back(pool_spec(2, 2));
        channels = out;
        first = false;
    }
    spec.layers.push_back(plain_spec(LayerSpec::Type::Flatten));
    spec.layers.push_back(linear_spec(options.hidden));
    spec.layers.push_back(plain_spec(LayerSpec::Type::Relu));
    spec.layers.push_back(linear_spec(options.classes));
    return spec;
}

ModelSpec build_soundnet5(const ModelOptions& options) {
    ModelSpec spec;
    // (channels, 1, length): 1-d audio as height-1 images
    spec.input_shape = {1, 1, 16000};
    if (options.input_shape.size() == 3 && options.input_shape[1] == 1)
        spec.input_shape = options.input_shape;
    spec.classes = 12;

    struct Conv1d {
        Index in, out, kernel, stride, pad, pool;
    };
    // Five conv1d stages; each max-pools along the signal. The pool widths
    // make the flattened feature count 512 at input length 16000.
    const Conv1d stages[] = {
        {1, 16, 64, 2, 32, 2},  {16, 32, 32, 2, 16, 2}, {32, 64, 16, 2, 8, 2},
        {64, 128, 8, 2, 4, 2},  {128, 256, 4, 2, 2, 16},
    };
    bool first = true;
    for (const Conv1d& s : stages) {
        LayerSpec conv = conv_spec(s.out, 1, s.kernel, 1, s.stride, 0, s.pad);
        apply_kernel_kind(conv, {s.out, s.in, 1, s.kernel}, options, first);
        spec.layers.push_back(conv);
        spec.layers.push_back(plain_spec(LayerSpec::Type::Relu));
        spec.layers.push_back(pool_spec(1, s.pool));
        first = false;
    }
    spec.layers.push_back(plain_spec(LayerSpec::Type::Flatten));
    spec.layers.push_back(linear_spec(256));
    spec.layers.push_back(plain_spec(LayerSpec::Type::Relu));
    spec.layers.push_back(linear_spec(12));
    return spec;
}

ModelSpec build_custom(const ModelOptions& options) {
    ModelSpec spec;
    spec.input_shape = options.input_shape;
    spec.classes = options.classes;

    Index channels = options.input_shape[0];
    bool first = true;
    std::stringstream tokens(options.custom_layers);
    std::string item;
    while (std::getline(tokens, item, ';')) {
        std::stringstream fields(item);
        std::string kind;
        fields >> kind;
        if (kind.empty()) continue;
        if (kind == "conv") {
            Index out, kh, kw, sh = 1, sw = 1, ph = 0, pw = 0;
            if (!(fields >> out >> kh >> kw))
                throw std::invalid_argument("custom layers: conv needs OUT KH KW [SH SW PH PW]");
            fields >> sh >> sw >> ph >> pw;
            LayerSpec conv = conv_spec(out, kh, kw, sh, sw, ph, pw);
            apply_kernel_kind(conv, {out, channels, kh, kw}, options, first);
            spec.layers.push_back(conv);
            channels = out;
            first = false;
        } else if (kind == "relu") {
            spec.layers.push_back(plain_spec(LayerSpec::Type::Relu));
        } else if (kind == "pool") {
            Index ph, pw;
            if (!(fields >> ph >> pw)) throw std::invalid_argument("custom layers: pool needs PH PW");
            spec.layers.push_back(pool_spec(ph, pw));
        } else if (kind == "flatten") {
            spec.layers.push_back(plain_spec(LayerSpec::Type::Flatten));
        } else if (kind == "linear") {
            Index out;
            if (!(fields >> out)) throw std::invalid_argument("custom layers: linear needs OUT");
            spec.layers.push_back(linear_spec(out));
        } else {
            throw std::invalid_argument("custom layers: unknown layer '" + kind + "'");
        }
    }
    if (spec.layers.empty()) throw std::invalid_argument("custom layers: empty description");
    return spec;
}

}  // namespace

ModelSpec build_model(const std::string& name, const ModelOptions& options) {
    ModelSpec spec;
    if (name == "small-cnn-2d")
        spec = build_small_cnn(options);
    else if (name == "small-bnn-2d")
        spec = build_small_bnn(options);
    else if (name == "soundnet5-1d")
        spec = build_soundnet5(options);
    else if (name == "custom-from-config")
        spec = build_custom(options);
    else
        throw std::invalid_argument("build_model: unknown model '" + name + "'");
    spec.theta = options.theta;
    spec.rescale = options.rescale;
    spec.ste = options.ste;
    return spec;
}

}  // namespace deften
