#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "deften/nn.hpp"
#include "deften/tensor_ops.hpp"

#include <cmath>

using namespace deften;

namespace {

Parameter* find_param(std::vector<Parameter*> params, const std::string& name) {
    for (Parameter* p : params)
        if (p->name == name) return p;
    REQUIRE_MESSAGE(false, "no parameter named ", name);
    return nullptr;
}

double model_loss(const Model& model, const Tensord& x, Index label,
                  const ForwardOptions& opts) {
    const Tape tape = model.forward(x, opts);
    return cross_entropy(tape.logits, label);
}

// Central-difference error with a floor so finite-difference roundoff cannot
// dominate near-zero gradients: above the floor this is a genuine relative
// comparison, below it an absolute one at floor * tol.
double grad_mismatch(double analytic, double numeric) {
    return std::abs(analytic - numeric) /
           std::max({std::abs(analytic), std::abs(numeric), 1e-4});
}

// Checks d(loss)/d(input) and every parameter gradient against central
// differences of the loss under the same forward options.
void check_gradients(Model& model, const Tensord& x, Index label, const ForwardOptions& opts,
                     double tol = 1e-4) {
    const double h = 1e-6;
    auto params = model.parameters();
    zero_grads(params);
    Tape tape = model.forward(x, opts);
    const Vectord dlogits = cross_entropy_grad(tape.logits, label);
    const Tensord dx = model.backward(tape, dlogits, true);

    Tensord xp = x;
    for (Index i = 0; i < x.size(); ++i) {
        xp[i] = x[i] + h;
        const double up = model_loss(model, xp, label, opts);
        xp[i] = x[i] - h;
        const double down = model_loss(model, xp, label, opts);
        xp[i] = x[i];
        const double numeric = (up - down) / (2.0 * h);
        INFO("input[", i, "]: analytic ", dx[i], " numeric ", numeric);
        CHECK(grad_mismatch(dx[i], numeric) < tol);
    }

    for (Parameter* p : params) {
        for (Index i = 0; i < p->value.size(); ++i) {
            const double keep = p->value[i];
            p->value[i] = keep + h;
            const double up = model_loss(model, x, label, opts);
            p->value[i] = keep - h;
            const double down = model_loss(model, x, label, opts);
            p->value[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            INFO(p->name, "[", i, "]: analytic ", p->grad[i], " numeric ", numeric);
            CHECK(grad_mismatch(p->grad[i], numeric) < tol);
        }
    }
}

Tensord random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensord t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// Magnitudes in [0.15, 0.85] with random signs: away from the kinks of |.|
// at zero and of the clipped-identity surrogate at +-1, so central
// differences stay valid for every ste variant.
Tensord random_kink_free(const Shape& shape, Rng& rng) {
    Tensord t(shape);
    for (Index i = 0; i < t.size(); ++i) {
        const double mag = rng.uniform(0.15, 0.85);
        t[i] = rng.bernoulli(0.5) ? mag : -mag;
    }
    return t;
}

ModelSpec custom_model(const std::string& layers, const Shape& input, Index classes,
                       ModelOptions options = {}) {
    options.input_shape = input;
    options.classes = classes;
    options.custom_layers = layers;
    return build_model("custom-from-config", options);
}

}  // namespace

TEST_CASE("finite differences: plain conv network") {
    Model model(custom_model("conv 3 3 3 1 1 1 1; relu; pool 2 2; flatten; linear 4",
                             {2, 5, 5}, 4));
    model.init_params(11);
    Rng rng(1201);
    const Tensord x = random_tensor({2, 5, 5}, rng);
    check_gradients(model, x, 2, {});
}

TEST_CASE("finite differences: strided conv on a height-1 signal") {
    Model model(custom_model("conv 3 1 5 1 2 0 2; relu; pool 1 2; flatten; linear 3",
                             {1, 1, 20}, 3));
    model.init_params(7);
    Rng rng(1202);
    const Tensord x = random_tensor({1, 1, 20}, rng);
    check_gradients(model, x, 0, {});
}

TEST_CASE("finite differences: tucker conv under replayed masks") {
    ModelOptions options;
    options.kernel_kind = "tucker";
    options.rank_rule = "halve";
    options.first_conv_plain = false;
    options.theta = 0.7;
    options.rescale = true;
    Model model(custom_model("conv 4 3 3 1 1 1 1; relu; flatten; linear 3", {2, 3, 3}, 3,
                             options));
    model.init_params(23);
    REQUIRE(model.tucker_conv_count() == 1);

    // kernel (4,2,3,3) halved to ranks (2,1,2,2); drop one index per droppable mode
    DropoutMasks masks;
    masks.lambdas = {{1, 0}, {1}, {1, 0}, {0, 1}};
    std::vector<DropoutMasks> replay = {masks};
    ForwardOptions opts;
    opts.mode = LayerMode::Replay;
    opts.replay = &replay;

    Rng rng(1203);
    const Tensord x = random_tensor({2, 3, 3}, rng);
    check_gradients(model, x, 1, opts);

    // every core entry whose mask product is zero must have exactly zero gradient
    Parameter* core = find_param(model.parameters(), "layer0.core");
    REQUIRE(core->value.shape() == Shape{2, 1, 2, 2});
    Index nonzero_grads = 0;
    for (Index i0 = 0; i0 < 2; ++i0)
        for (Index i2 = 0; i2 < 2; ++i2)
            for (Index i3 = 0; i3 < 2; ++i3) {
                const bool kept = i0 == 0 && i2 == 0 && i3 == 1;
                if (!kept) CHECK(core->grad(i0, 0, i2, i3) == 0.0);
                if (core->grad(i0, 0, i2, i3) != 0.0) ++nonzero_grads;
            }
    CHECK(nonzero_grads == 1);
}

TEST_CASE("finite differences: binarized conv in soft-sign mode, every ste variant") {
    for (SteVariant variant :
         {SteVariant::ClippedIdentity, SteVariant::Tanh, SteVariant::TanhScaled}) {
        CAPTURE(static_cast<int>(variant));
        ModelOptions options;
        options.kernel_kind = "binary";
        options.first_conv_plain = false;
        options.ste = variant;
        Model model(custom_model("conv 2 2 2; relu; flatten; linear 2", {1, 4, 4}, 2, options));
        model.init_params(31);

        Rng rng(1301 + static_cast<std::uint64_t>(variant));
        Parameter* kernel = find_param(model.parameters(), "layer0.kernel");
        kernel->value = random_kink_free(kernel->value.shape(), rng);
        const Tensord x = random_kink_free({1, 4, 4}, rng);

        ForwardOptions opts;
        opts.soft_sign = true;
        check_gradients(model, x, 1, opts);
    }
}

TEST_CASE("finite differences: binarized conv over a masked tucker kernel") {
    ModelOptions options;
    options.kernel_kind = "binary";
    options.first_conv_plain = false;
    options.theta = 0.8;
    options.rescale = true;
    options.ste = SteVariant::Tanh;
    Model model(custom_model("conv 3 2 2; relu; flatten; linear 2", {2, 3, 3}, 2, options));
    model.init_params(41);
    REQUIRE(model.tucker_conv_count() == 1);

    // kernel (3,2,2,2) at spatial-full ranks (2,1,2,2)
    DropoutMasks masks;
    masks.lambdas = {{1, 0}, {1}, {0, 1}, {1, 1}};
    std::vector<DropoutMasks> replay = {masks};
    ForwardOptions opts;
    opts.mode = LayerMode::Replay;
    opts.replay = &replay;
    opts.soft_sign = true;

    Rng rng(1401);
    const Tensord x = random_kink_free({2, 3, 3}, rng);
    check_gradients(model, x, 0, opts);
}

TEST_CASE("hard binarized forward matches the composed binarized convolution") {
    ModelOptions options;
    options.kernel_kind = "binary";
    options.first_conv_plain = false;
    Model model(custom_model("conv 2 2 2; flatten", {1, 4, 4}, 18, options));
    model.init_params(51);

    Rng rng(1501);
    const Tensord x = random_tensor({1, 4, 4}, rng);
    const Tape tape = model.forward(x);

    const Tensord& w = find_param(model.parameters(), "layer0.kernel")->value;
    const Tensord& bias = find_param(model.parameters(), "layer0.bias")->value;
    const Tensord y = binary_conv(w, x, ConvMeta{});
    Index flat = 0;
    for (Index f = 0; f < y.dim(0); ++f)
        for (Index p = 0; p < y.dim(1); ++p)
            for (Index q = 0; q < y.dim(2); ++q, ++flat)
                CHECK(tape.logits(flat) == y(f, p, q) + bias[f]);
}

TEST_CASE("identity conv and flatten reproduce the input as logits") {
    Model model(custom_model("conv 1 1 1; flatten", {1, 2, 2}, 4));
    model.init_params(3);
    auto params = model.parameters();
    find_param(params, "layer0.kernel")->value[0] = 1.0;
    find_param(params, "layer0.bias")->value[0] = 0.0;

    Rng rng(1601);
    const Tensord x = random_tensor({1, 2, 2}, rng);
    const Tape tape = model.forward(x);
    REQUIRE(tape.logits.size() == 4);
    for (Index i = 0; i < 4; ++i) CHECK(tape.logits(i) == x[i]);
}

TEST_CASE("max pool routes the gradient to the first maximum on ties") {
    Model model(custom_model("pool 2 2; flatten", {1, 2, 2}, 1));
    Tensord x = Tensord::constant({1, 2, 2}, 3.0);
    Tape tape = model.forward(x);
    CHECK(tape.logits(0) == 3.0);

    Vectord dlogits(1);
    dlogits << 2.5;
    const Tensord dx = model.backward(tape, dlogits, false);
    CHECK(dx(0, 0, 0) == 2.5);
    CHECK(dx(0, 0, 1) == 0.0);
    CHECK(dx(0, 1, 0) == 0.0);
    CHECK(dx(0, 1, 1) == 0.0);
}

TEST_CASE("theta=1 randomized forward equals deterministic bitwise") {
    ModelOptions options;
    options.kernel_kind = "tucker";
    options.first_conv_plain = false;
    options.theta = 1.0;
    options.rescale = true;
    Model model(custom_model("conv 4 3 3 1 1 1 1; relu; pool 2 2; flatten; linear 3",
                             {2, 4, 4}, 3, options));
    model.init_params(61);

    Rng rng(1701);
    const Tensord x = random_tensor({2, 4, 4}, rng);
    const Tape det = model.forward(x);
    ForwardOptions opts;
    opts.mode = LayerMode::Randomized;
    const Tape rand_pass = model.forward(x, opts, &rng);

    REQUIRE(rand_pass.drawn_masks.size() == 1);
    for (const auto& lambda : rand_pass.drawn_masks[0].lambdas)
        for (int bit : lambda) CHECK(bit == 1);
    REQUIRE(det.logits.size() == rand_pass.logits.size());
    for (Index i = 0; i < det.logits.size(); ++i) CHECK(det.logits(i) == rand_pass.logits(i));
}

TEST_CASE("replay reproduces a randomized draw bitwise") {
    ModelOptions options;
    options.kernel_kind = "tucker";
    options.first_conv_plain = false;
    options.theta = 0.6;
    options.rescale = true;
    Model model(custom_model(
        "conv 4 3 3 1 1 1 1; relu; conv 6 3 3 1 1 1 1; relu; flatten; linear 3",
        {2, 4, 4}, 3, options));
    model.init_params(71);
    REQUIRE(model.tucker_conv_count() == 2);

    Rng rng(1801);
    const Tensord x = random_tensor({2, 4, 4}, rng);
    ForwardOptions randomized;
    randomized.mode = LayerMode::Randomized;
    Tape drawn = model.forward(x, randomized, &rng);
    REQUIRE(drawn.drawn_masks.size() == 2);

    ForwardOptions replayed;
    replayed.mode = LayerMode::Replay;
    replayed.replay = &drawn.drawn_masks;
    Tape again = model.forward(x, replayed);
    for (Index i = 0; i < drawn.logits.size(); ++i) CHECK(again.logits(i) == drawn.logits(i));

    // the replayed tape drives a backward pass like any other
    zero_grads(model.parameters());
    const Vectord dlogits = cross_entropy_grad(again.logits, 0);
    const Tensord dx = model.backward(again, dlogits, true);
    CHECK(dx.shape() == Shape{2, 4, 4});
}

TEST_CASE("forward mode misuse and tape reuse throw") {
    ModelOptions options;
    options.kernel_kind = "tucker";
    options.first_conv_plain = false;
    options.theta = 0.5;
    Model model(custom_model("conv 4 3 3 1 1 1 1; flatten; linear 2", {2, 3, 3}, 2, options));
    model.init_params(81);
    Rng rng(1901);
    const Tensord x = random_tensor({2, 3, 3}, rng);

    ForwardOptions randomized;
    randomized.mode = LayerMode::Randomized;
    CHECK_THROWS_AS(model.forward(x, randomized), std::invalid_argument);

    ForwardOptions replay;
    replay.mode = LayerMode::Replay;
    CHECK_THROWS_AS(model.forward(x, replay), std::invalid_argument);
    std::vector<DropoutMasks> empty;
    replay.replay = &empty;
    CHECK_THROWS_AS(model.forward(x, replay), std::invalid_argument);

    Tape tape = model.forward(x);
    Vectord dlogits = cross_entropy_grad(tape.logits, 0);
    model.backward(tape, dlogits, false);
    CHECK_THROWS_AS(model.backward(tape, dlogits, false), std::logic_error);

    CHECK_THROWS_AS(model.forward(random_tensor({2, 4, 4}, rng)), std::invalid_argument);
}

TEST_CASE("cross entropy matches closed forms") {
    Vectord uniform = Vectord::Constant(5, 1.7);
    CHECK(std::abs(cross_entropy(uniform, 3) - std::log(5.0)) < 1e-12);

    Vectord confident = Vectord::Zero(4);
    confident(2) = 100.0;
    CHECK(cross_entropy(confident, 2) < 1e-10);
    CHECK(cross_entropy(confident, 2) >= 0.0);

    Rng rng(2001);
    Vectord logits(6);
    for (Index i = 0; i < 6; ++i) logits(i) = rng.uniform(-3.0, 3.0);
    const double base = cross_entropy(logits, 4);
    CHECK(std::abs(cross_entropy(Vectord(logits.array() + 7.3), 4) - base) < 1e-12);

    const Vectord g = cross_entropy_grad(logits, 4);
    CHECK(std::abs(g.sum()) < 1e-12);
    const double h = 1e-6;
    for (Index i = 0; i < 6; ++i) {
        Vectord shifted = logits;
        shifted(i) += h;
        const double up = cross_entropy(shifted, 4);
        shifted(i) = logits(i) - h;
        const double down = cross_entropy(shifted, 4);
        CHECK(grad_mismatch(g(i), (up - down) / (2.0 * h)) < 1e-4);
    }

    CHECK_THROWS_AS(cross_entropy(logits, -1), std::invalid_argument);
    CHECK_THROWS_AS(cross_entropy(logits, 6), std::invalid_argument);
    CHECK_THROWS_AS(cross_entropy_grad(logits, 6), std::invalid_argument);
}

TEST_CASE("learning rate schedule steps down at the listed epochs") {
    OptimizerConfig config;
    config.learning_rate = 0.1;
    config.drop_epochs = {150, 250};
    config.drop_factor = 0.1;
    CHECK(learning_rate_at(config, 0) == 0.1);
    CHECK(learning_rate_at(config, 149) == 0.1);
    CHECK(learning_rate_at(config, 150) == 0.1 * 0.1);
    CHECK(learning_rate_at(config, 249) == 0.1 * 0.1);
    CHECK(learning_rate_at(config, 250) == 0.1 * 0.1 * 0.1);
    CHECK(learning_rate_at(config, 400) == 0.1 * 0.1 * 0.1);

    config.learning_rate = -1.0;
    CHECK_THROWS_AS(learning_rate_at(config, 0), std::invalid_argument);
}

TEST_CASE("sgd step follows the momentum update") {
    Parameter p("w", {2});
    p.value[0] = 1.0;
    p.value[1] = -2.0;

    OptimizerConfig config;
    config.learning_rate = 0.1;
    config.momentum = 0.9;
    config.weight_decay = 0.0;
    config.drop_epochs = {};

    SUBCASE("zero gradient and zero momentum leave the value unchanged") {
        sgd_step({&p}, config, 0);
        CHECK(p.value[0] == 1.0);
        CHECK(p.value[1] == -2.0);
    }

    SUBCASE("one step matches the closed form") {
        config.weight_decay = 0.01;
        p.grad[0] = 0.5;
        p.grad[1] = -0.25;
        const double v0 = 0.5 + 0.01 * 1.0;
        const double v1 = -0.25 + 0.01 * -2.0;
        sgd_step({&p}, config, 0);
        CHECK(p.value[0] == doctest::Approx(1.0 - 0.1 * v0).epsilon(1e-15));
        CHECK(p.value[1] == doctest::Approx(-2.0 - 0.1 * v1).epsilon(1e-15));
        CHECK(p.momentum[0] == doctest::Approx(v0).epsilon(1e-15));
    }

    SUBCASE("two steps on a quadratic match a hand simulation") {
        // loss 0.5 w^2, so grad = w at each step
        Parameter q("q", {1});
        q.value[0] = 2.0;
        double w = 2.0, v = 0.0;
        for (int step = 0; step < 2; ++step) {
            q.grad[0] = q.value[0];
            sgd_step({&q}, config, 0);
            v = config.momentum * v + w;
            w -= config.learning_rate * v;
        }
        CHECK(std::abs(q.value[0] - w) < 1e-12);
    }
}

TEST_CASE("zero_grads and scale_grads act on every parameter") {
    Parameter a("a", {2}), b("b", {3});
    for (Index i = 0; i < 2; ++i) a.grad[i] = 1.5;
    for (Index i = 0; i < 3; ++i) b.grad[i] = -2.0;
    scale_grads({&a, &b}, 0.5);
    CHECK(a.grad[0] == 0.75);
    CHECK(b.grad[2] == -1.0);
    zero_grads({&a, &b});
    CHECK(a.grad[1] == 0.0);
    CHECK(b.grad[0] == 0.0);
}

TEST_CASE("soundnet5-1d descriptor") {
    const ModelSpec spec = build_model("soundnet5-1d", {});
    CHECK(spec.classes == 12);
    CHECK(spec.input_shape == Shape{1, 1, 16000});
    REQUIRE(spec.layers.size() == 19);

    const LayerSpec& first = spec.layers[0];
    CHECK(first.type == LayerSpec::Type::Conv);
    CHECK(first.out_channels == 16);
    CHECK(first.kernel_h == 1);
    CHECK(first.kernel_w == 64);
    CHECK(first.meta.stride_h == 1);
    CHECK(first.meta.stride_w == 2);
    CHECK(first.meta.pad_h == 0);
    CHECK(first.meta.pad_w == 32);

    const Index conv_out[] = {16, 32, 64, 128, 256};
    const Index conv_k[] = {64, 32, 16, 8, 4};
    const Index conv_pad[] = {32, 16, 8, 4, 2};
    const Index pool_w[] = {2, 2, 2, 2, 16};
    for (int s = 0; s < 5; ++s) {
        const LayerSpec& conv = spec.layers[3 * s];
        CHECK(conv.out_channels == conv_out[s]);
        CHECK(conv.kernel_w == conv_k[s]);
        CHECK(conv.meta.stride_w == 2);
        CHECK(conv.meta.pad_w == conv_pad[s]);
        CHECK(spec.layers[3 * s + 1].type == LayerSpec::Type::Relu);
        const LayerSpec& pool = spec.layers[3 * s + 2];
        CHECK(pool.type == LayerSpec::Type::Pool);
        CHECK(pool.pool_h == 1);
        CHECK(pool.pool_w == pool_w[s]);
    }
    CHECK(spec.layers[15].type == LayerSpec::Type::Flatten);
    CHECK(spec.layers[16].out_features == 256);
    CHECK(spec.layers[18].out_features == 12);

    // the construction walk proves the shape chain ends at 12 classes, and the
    // first dense layer's weight shape pins the flattened feature count at 512
    Model model(spec);
    const Parameter* head = nullptr;
    for (const Parameter* p : static_cast<const Model&>(model).parameters())
        if (p->name == "layer16.weight") head = p;
    REQUIRE(head != nullptr);
    CHECK(head->value.shape() == Shape{256, 512});

    model.init_params(91);
    Rng rng(2101);
    const Tape tape = model.forward(random_tensor({1, 1, 16000}, rng, -0.5, 0.5));
    CHECK(tape.logits.size() == 12);
}

TEST_CASE("small-cnn-2d descriptor") {
    const ModelSpec spec = build_model("small-cnn-2d", {});
    CHECK(spec.classes == 4);
    CHECK(spec.input_shape == Shape{1, 8, 8});
    Model model(spec);
    model.init_params(101);
    Rng rng(2201);
    const Tape tape = model.forward(random_tensor({1, 8, 8}, rng));
    CHECK(tape.logits.size() == 4);

    ModelOptions tucker;
    tucker.kernel_kind = "tucker";
    const ModelSpec defended = build_model("small-cnn-2d", tucker);
    CHECK(defended.layers[0].tucker_ranks.empty());  // first conv stays plain
    CHECK(defended.layers[3].tucker_ranks == Shape{8, 4, 3, 3});
    CHECK(defended.layers[6].tucker_ranks == Shape{16, 8, 3, 3});

    tucker.rank_rule = "halve";
    CHECK(build_model("small-cnn-2d", tucker).layers[3].tucker_ranks == Shape{8, 4, 2, 2});

    ModelOptions binary;
    binary.kernel_kind = "binary";
    const ModelSpec hard = build_model("small-cnn-2d", binary);
    CHECK_FALSE(hard.layers[0].binarized);
    CHECK(hard.layers[3].binarized);
    CHECK(hard.layers[3].tucker_ranks.empty());

    binary.theta = 0.9;
    const ModelSpec defended_binary = build_model("small-cnn-2d", binary);
    CHECK(defended_binary.layers[3].binarized);
    CHECK(defended_binary.layers[3].tucker_ranks == Shape{8, 4, 3, 3});
}

TEST_CASE("model builder rejects bad descriptions") {
    CHECK_THROWS_AS(build_model("resnet-18", {}), std::invalid_argument);

    CHECK_THROWS_AS(custom_model("conv 3", {1, 4, 4}, 2), std::invalid_argument);
    CHECK_THROWS_AS(custom_model("frobnicate 3", {1, 4, 4}, 2), std::invalid_argument);
    CHECK_THROWS_AS(custom_model("", {1, 4, 4}, 2), std::invalid_argument);
    CHECK_THROWS_AS(custom_model("pool 2", {1, 4, 4}, 2), std::invalid_argument);

    // structurally invalid networks fail at model construction
    CHECK_THROWS_AS(Model(custom_model("flatten; linear 3", {1, 2, 2}, 4)),
                    std::invalid_argument);  // output size mismatch
    CHECK_THROWS_AS(Model(custom_model("linear 3", {1, 2, 2}, 3)),
                    std::invalid_argument);  // linear before flatten
    CHECK_THROWS_AS(Model(custom_model("pool 4 4; flatten", {1, 2, 2}, 4)),
                    std::invalid_argument);  // pool window larger than input

    ModelSpec bad_theta = custom_model("conv 1 1 1; flatten", {1, 2, 2}, 4);
    bad_theta.theta = 1.5;
    CHECK_THROWS_AS(Model(std::move(bad_theta)), std::invalid_argument);
}

TEST_CASE("init_params is deterministic and seed-sensitive") {
    const ModelSpec spec = build_model("small-cnn-2d", {});
    Model a(spec), b(spec), c(spec);
    a.init_params(5);
    b.init_params(5);
    c.init_params(6);

    auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    REQUIRE(pa.size() == pb.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i]->value.shape() == pb[i]->value.shape());
        for (Index j = 0; j < pa[i]->value.size(); ++j) {
            CHECK(pa[i]->value[j] == pb[i]->value[j]);
            if (pa[i]->value[j] != pc[i]->value[j]) any_diff = true;
        }
    }
    CHECK(any_diff);
}
