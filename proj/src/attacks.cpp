#include "deften/attacks.hpp"

#include "deften/tensor_ops.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <ostream>

namespace deften {

namespace {

void validate_bounds(const AttackConfig& cfg) {
    if (cfg.epsilon < 0.0) throw std::invalid_argument("attack: epsilon must be non-negative");
    if (!(cfg.pixel_low < cfg.pixel_high))
        throw std::invalid_argument("attack: pixel bounds must satisfy low < high");
}

void validate_iterative(const AttackConfig& cfg) {
    validate_bounds(cfg);
    if (cfg.step_size <= 0.0)
        throw std::invalid_argument("attack: iterative attacks need a positive step size");
    if (cfg.iterations < 1)
        throw std::invalid_argument("attack: iterative attacks need at least one iteration");
}

// Prediction for the success flag, queried in the attack's own mode.
void finalize(Model& model, const Tensord& x, Index label, const AttackConfig& cfg, Rng* rng,
              Tensord x_adv, AttackResult& result) {
    result.delta = x_adv - x;
    result.x_adv = std::move(x_adv);
    result.success = predict(model, result.x_adv, {cfg.mode}, rng) != label;
    ++result.forward_queries;
}

// Shared bim/pgd/bpda loop; direction(x_cur, result) returns the raw gradient
// to take the sign of and accounts its own queries on result.
AttackResult iterate_attack(Model& model, const Tensord& x, Index label, const AttackConfig& cfg,
                            Rng* rng, AttackObserver* observer,
                            const std::function<Tensord(const Tensord&, AttackResult&)>& direction) {
    validate_iterative(cfg);
    AttackResult result;
    Tensord x_adv = x;
    if (cfg.random_start) {
        if (!rng) throw std::invalid_argument("attack: random start needs an rng");
        for (Index i = 0; i < x_adv.size(); ++i)
            x_adv[i] = x[i] + rng->uniform(-cfg.epsilon, cfg.epsilon);
        x_adv = project_linf(x_adv, x, cfg);
        if (observer) observer->on_iterate(x_adv, x_adv - x);
    }
    for (Index step = 0; step < cfg.iterations; ++step) {
        const Tensord s = attack_sign(direction(x_adv, result));
        for (Index i = 0; i < x_adv.size(); ++i) x_adv[i] += cfg.step_size * s[i];
        x_adv = project_linf(x_adv, x, cfg);
        if (observer) observer->on_iterate(x_adv, x_adv - x);
    }
    finalize(model, x, label, cfg, rng, std::move(x_adv), result);
    return result;
}

}  // namespace

Tensord attack_sign(const Tensord& g) {
    Tensord s(g.shape());
    for (Index i = 0; i < g.size(); ++i) s[i] = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
    return s;
}

Tensord input_gradient(Model& model, const Tensord& x, Index label, LayerMode mode, Rng* rng,
                       double* loss_out) {
    ForwardOptions opts;
    opts.mode = mode;
    Tape tape = model.forward(x, opts, rng);
    if (loss_out) *loss_out = cross_entropy(tape.logits, label);
    return model.backward(tape, cross_entropy_grad(tape.logits, label), false);
}

Tensord project_linf(const Tensord& candidate, const Tensord& x, const AttackConfig& cfg) {
    if (!candidate.same_shape(x)) throw std::invalid_argument("project_linf: shape mismatch");
    Tensord out(x.shape());
    for (Index i = 0; i < x.size(); ++i) {
        const double d = std::clamp(candidate[i] - x[i], -cfg.epsilon, cfg.epsilon);
        out[i] = std::clamp(x[i] + d, cfg.pixel_low, cfg.pixel_high);
    }
    return out;
}

IterationSchedule iteration_schedule(double epsilon_255) {
    if (epsilon_255 <= 0.0)
        throw std::invalid_argument("iteration_schedule: epsilon must be positive");
    IterationSchedule s;
    s.step_size = 1.0;
    s.iterations = static_cast<Index>(std::floor(std::min(epsilon_255 + 4.0, 1.25 * epsilon_255)));
    return s;
}

AttackConfig scheduled_config(double epsilon_255) {
    const IterationSchedule s = iteration_schedule(epsilon_255);
    AttackConfig cfg;
    cfg.epsilon = epsilon_255 / 255.0;
    cfg.step_size = s.step_size / 255.0;
    cfg.iterations = s.iterations;
    return cfg;
}

AttackResult fgsm(Model& model, const Tensord& x, Index label, const AttackConfig& cfg, Rng* rng,
                  AttackObserver* observer) {
    validate_bounds(cfg);
    AttackResult result;
    const Tensord s = attack_sign(input_gradient(model, x, label, cfg.mode, rng));
    result.forward_queries = 1;
    result.backward_queries = 1;
    Tensord x_adv(x.shape());
    for (Index i = 0; i < x.size(); ++i)
        x_adv[i] = std::clamp(x[i] + cfg.epsilon * s[i], cfg.pixel_low, cfg.pixel_high);
    if (observer) observer->on_iterate(x_adv, x_adv - x);
    finalize(model, x, label, cfg, rng, std::move(x_adv), result);
    return result;
}

AttackResult bim(Model& model, const Tensord& x, Index label, const AttackConfig& cfg, Rng* rng,
                 AttackObserver* observer) {
    AttackConfig no_start = cfg;
    no_start.random_start = false;
    return pgd(model, x, label, no_start, rng, observer);
}

AttackResult pgd(Model& model, const Tensord& x, Index label, const AttackConfig& cfg, Rng* rng,
                 AttackObserver* observer) {
    auto direction = [&](const Tensord& cur, AttackResult& r) {
        ++r.forward_queries;
        ++r.backward_queries;
        return input_gradient(model, cur, label, cfg.mode, rng);
    };
    return iterate_attack(model, x, label, cfg, rng, observer, direction);
}

Tensord eot_gradient(Model& model, const Tensord& x, Index label, Index k, Rng& rng) {
    if (k < 1) throw std::invalid_argument("eot_gradient: need at least one sample");
    Tensord sum(x.shape());
    for (Index j = 0; j < k; ++j)
        sum += input_gradient(model, x, label, LayerMode::Randomized, &rng);
    return sum;
}

AttackResult bpda_pgd(Model& model, const Tensord& x, Index label, const AttackConfig& cfg,
                      Rng& rng, AttackObserver* observer) {
    if (cfg.eot_samples < 1)
        throw std::invalid_argument("bpda_pgd: need at least one eot sample");
    AttackConfig randomized = cfg;
    randomized.mode = LayerMode::Randomized;
    auto direction = [&](const Tensord& cur, AttackResult& r) {
        r.forward_queries += cfg.eot_samples;
        r.backward_queries += cfg.eot_samples;
        return eot_gradient(model, cur, label, cfg.eot_samples, rng);
    };
    return iterate_attack(model, x, label, randomized, &rng, observer, direction);
}

double transfer_attack(Model& source, Model& target, const AttackFn& attack,
                       const Dataset& examples, const ForwardOptions& eval_opts, Rng* eval_rng) {
    if (source.spec().input_shape != target.spec().input_shape ||
        source.spec().classes != target.spec().classes)
        throw std::invalid_argument("transfer_attack: models disagree on input shape or classes");
    if (examples.empty()) throw std::invalid_argument("transfer_attack: no examples");
    Index correct = 0;
    for (const Example& ex : examples) {
        const AttackResult r = attack(source, ex.x, ex.label);
        if (predict(target, r.x_adv, eval_opts, eval_rng) == ex.label) ++correct;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(examples.size());
}

AttackRecord make_record(Index index, double epsilon, const std::string& attack,
                         const AttackResult& result) {
    AttackRecord record;
    record.index = index;
    record.epsilon = epsilon;
    record.attack = attack;
    record.success = result.success;
    record.queries = result.forward_queries + result.backward_queries;
    record.linf_delta = 0.0;
    for (Index i = 0; i < result.delta.size(); ++i)
        record.linf_delta = std::max(record.linf_delta, std::abs(result.delta[i]));
    return record;
}

void append_record(std::ostream& os, const AttackRecord& record) {
    const nlohmann::json j = {{"index", record.index},       {"epsilon", record.epsilon},
                              {"attack", record.attack},     {"success", record.success},
                              {"queries", record.queries},   {"linf_delta", record.linf_delta}};
    os << j.dump() << '\n';
}

AttackRecord parse_record(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("attack record: ") + e.what());
    }
    AttackRecord record;
    record.index = j.at("index").get<Index>();
    record.epsilon = j.at("epsilon").get<double>();
    record.attack = j.at("attack").get<std::string>();
    record.success = j.at("success").get<bool>();
    record.queries = j.at("queries").get<Index>();
    record.linf_delta = j.at("linf_delta").get<double>();
    return record;
}

}  // namespace deften
