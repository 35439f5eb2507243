#pragma once

#include "deften/binary.hpp"
#include "deften/conv.hpp"
#include "deften/rng.hpp"
#include "deften/tucker_layer.hpp"

#include <memory>
#include <string>
#include <vector>

namespace deften {

// Trainable tensor with its gradient and momentum buffers, all same-shaped.
struct Parameter {
    std::string name;
    Tensord value, grad, momentum;

    Parameter() = default;
    Parameter(std::string n, const Shape& shape)
        : name(std::move(n)), value(shape), grad(shape), momentum(shape) {}
};

struct LayerSpec {
    enum class Type { Conv, Relu, Pool, Flatten, Linear };
    Type type = Type::Relu;

    // Conv fields. An empty tucker_ranks means a plain dense kernel; non-empty
    // means the kernel lives in Tucker form at those ranks. `binarized` wraps
    // whichever parametrization is active in the sign/alpha/K arithmetic.
    Index out_channels = 0;
    Index kernel_h = 1, kernel_w = 1;
    ConvMeta meta;
    Shape tucker_ranks;
    bool binarized = false;

    Index pool_h = 1, pool_w = 1;  // Pool
    Index out_features = 0;        // Linear
};

struct ModelSpec {
    std::vector<LayerSpec> layers;
    Shape input_shape;  // (C, H, W); 1-d signals use (C, 1, L)
    Index classes = 0;
    double theta = 1.0;
    bool rescale = false;
    SteVariant ste = SteVariant::ClippedIdentity;
};

// Knobs for the named model builders.
struct ModelOptions {
    Shape input_shape = {1, 8, 8};
    Index classes = 4;
    std::vector<Index> conv_channels = {8, 16, 32};  // small-cnn-2d block widths
    Index hidden = 32;                               // small-cnn-2d penultimate width
    double theta = 1.0;
    bool rescale = false;
    SteVariant ste = SteVariant::ClippedIdentity;
    std::string kernel_kind = "plain";  // plain | tucker | binary
    // Tucker rank rule: "halve" = ceil(dim/2) on every mode; "spatial-full"
    // halves only filter/channel modes and keeps spatial modes at full rank
    // (small spatial ranks make whole-mode dropout far too likely).
    std::string rank_rule = "spatial-full";
    // Keep the first conv out of the tucker/binary parametrization. On for
    // binary by convention (first layer stays real-valued); on for tucker so a
    // tiny first-layer core cannot lose an entire mode to dropout.
    bool first_conv_plain = true;
    std::string custom_layers;  // used by custom-from-config
};

ModelSpec build_model(const std::string& name, const ModelOptions& options);

struct ForwardOptions {
    LayerMode mode = LayerMode::Deterministic;
    // Replay masks for tucker convs, in layer order. Required iff mode==Replay.
    const std::vector<DropoutMasks>* replay = nullptr;
    // Replace sgn with its smooth STE surrogate in binary layers, making the
    // whole forward differentiable; used by gradient checks.
    bool soft_sign = false;
};

namespace nn_detail {
struct LayerCtx {
    virtual ~LayerCtx() = default;
};
class Layer;
}  // namespace nn_detail

// Record of one realized forward pass: per-layer saved state plus the masks
// actually drawn, enough to differentiate the exact network that ran.
struct Tape {
    std::vector<std::unique_ptr<nn_detail::LayerCtx>> ctxs;
    Vectord logits;
    std::vector<DropoutMasks> drawn_masks;  // one per tucker conv, layer order
    bool consumed = false;
};

class Model {
public:
    explicit Model(ModelSpec spec);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) noexcept;
    Model& operator=(Model&&) noexcept;
    ~Model();

    const ModelSpec& spec() const { return spec_; }

    // Deterministic He-style initialization; tucker kernels are initialized by
    // decomposing a freshly initialized dense kernel.
    void init_params(std::uint64_t seed);

    // Single-sample forward. Randomized mode consumes one seed per tucker conv
    // from rng.
    Tape forward(const Tensord& x, const ForwardOptions& opts = {}, Rng* rng = nullptr) const;

    // Reverse pass from d(loss)/d(logits). Returns d(loss)/d(input) and, when
    // accumulate_param_grads is set, adds parameter gradients in place. A tape
    // drives exactly one backward pass.
    Tensord backward(Tape& tape, const Vectord& dlogits, bool accumulate_param_grads);

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;

    Index tucker_conv_count() const;

private:
    ModelSpec spec_;
    std::vector<std::unique_ptr<nn_detail::Layer>> layers_;
};

// Argmax of the logits from one forward pass; the first maximum wins ties.
Index predict(const Model& model, const Tensord& x, const ForwardOptions& opts = {},
              Rng* rng = nullptr);

double cross_entropy(const Vectord& logits, Index label);
Vectord cross_entropy_grad(const Vectord& logits, Index label);

struct OptimizerConfig {
    double learning_rate = 0.1;
    std::vector<Index> drop_epochs = {150, 250};
    double drop_factor = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-6;
};

// Step schedule: the base rate multiplied by drop_factor once per listed epoch
// that has been reached.
double learning_rate_at(const OptimizerConfig& config, Index epoch);

void zero_grads(const std::vector<Parameter*>& params);
void scale_grads(const std::vector<Parameter*>& params, double factor);

// v <- momentum * v + grad + weight_decay * value; value <- value - lr(epoch) * v
void sgd_step(const std::vector<Parameter*>& params, const OptimizerConfig& config, Index epoch);

}  // namespace deften
