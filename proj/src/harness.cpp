#include "deften/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace deften {

namespace {

// Independent seed streams carved out of the experiment seed. Keeping the
// attack stream separate from the model streams is what makes an adversarial
// run with epsilon list {0} reproduce standard training bit for bit.
constexpr std::uint64_t kInitStream = 0x11;
constexpr std::uint64_t kPretrainStream = 0x22;
constexpr std::uint64_t kMainStream = 0x33;
constexpr std::uint64_t kDataStream = 0xDA;
constexpr std::uint64_t kDefenseStream = 0xDE;
constexpr std::uint64_t kAttackStream = 0xA7;

std::pair<double, double> input_bounds(const ExperimentConfig& config) {
    if (config.dataset == "synthetic-1d") return {-1.0, 1.0};
    return {0.0, 1.0};
}

Index argmax_logit(const Vectord& logits) {
    Index best = 0;
    for (Index i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = i;
    return best;
}

void copy_parameters(const Model& src, Model& dst) {
    const auto from = src.parameters();
    const auto to = dst.parameters();
    if (from.size() != to.size())
        throw std::logic_error("parameter copy across differently shaped models");
    for (std::size_t i = 0; i < from.size(); ++i) {
        if (from[i]->name != to[i]->name || !from[i]->value.same_shape(to[i]->value))
            throw std::logic_error("parameter copy mismatch at '" + from[i]->name + "'");
        to[i]->value = from[i]->value;
    }
}

AttackConfig build_attack_config(const ExperimentConfig& config, const std::string& name,
                                 double epsilon255, LayerMode naive_mode) {
    AttackConfig a = scheduled_config(epsilon255);
    const auto [lo, hi] = input_bounds(config);
    a.pixel_low = lo;
    a.pixel_high = hi;
    a.mode = naive_mode;
    a.eot_samples = config.eot_samples;
    if (name == "fgsm") {
        a.iterations = 1;
        a.random_start = false;
    } else if (name == "bim") {
        a.random_start = false;
    } else if (name == "pgd" || name == "bpda") {
        a.random_start = true;
    } else {
        throw std::invalid_argument("attack: unknown attack '" + name + "'");
    }
    if (config.attack_iterations > 0 && name != "fgsm") a.iterations = config.attack_iterations;
    return a;
}

void train_loop(Model& model, const ExperimentConfig& config, const Dataset& train_set,
                Index epochs, std::uint64_t stream_seed, TrainLog* log) {
    const OptimizerConfig opt = optimizer_config(config);
    const auto params = model.parameters();
    const bool randomized = model.spec().theta < 1.0;
    const bool adversarial = !config.train_epsilon_list.empty();
    const auto [lo, hi] = input_bounds(config);

    Rng shuffle_rng(derive_seed(stream_seed, 1));
    Rng dropout_rng(derive_seed(stream_seed, 2));
    Rng attack_rng(derive_seed(stream_seed, 3));

    const Index n = static_cast<Index>(train_set.size());
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});

    for (Index epoch = 0; epoch < epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        Index correct = 0;
        for (Index start = 0; start < n; start += config.batch_size) {
            const Index end = std::min(n, start + config.batch_size);
            zero_grads(params);
            double epsilon255 = 0.0;
            if (adversarial)
                epsilon255 = config.train_epsilon_list[attack_rng.below(
                    config.train_epsilon_list.size())];
            for (Index k = start; k < end; ++k) {
                const Example& ex = train_set[static_cast<std::size_t>(order[k])];
                Tensord x = ex.x;
                if (epsilon255 > 0.0) {
                    AttackConfig a = scheduled_config(epsilon255);
                    a.pixel_low = lo;
                    a.pixel_high = hi;
                    a.random_start = true;
                    a.mode = randomized ? LayerMode::Randomized : LayerMode::Deterministic;
                    x = pgd(model, ex.x, ex.label, a, &attack_rng).x_adv;
                }
                ForwardOptions fo;
                fo.mode = randomized ? LayerMode::Randomized : LayerMode::Deterministic;
                Tape tape = model.forward(x, fo, randomized ? &dropout_rng : nullptr);
                loss_sum += cross_entropy(tape.logits, ex.label);
                correct += argmax_logit(tape.logits) == ex.label;
                model.backward(tape, cross_entropy_grad(tape.logits, ex.label), true);
            }
            scale_grads(params, 1.0 / static_cast<double>(end - start));
            sgd_step(params, opt, epoch);
        }
        if (log) {
            log->loss.push_back(loss_sum / static_cast<double>(n));
            log->accuracy.push_back(100.0 * static_cast<double>(correct) / static_cast<double>(n));
        }
    }
}

void finalize_row(SweepRow& row) {
    const auto k = row.run_accuracy.size();
    row.mean = std::accumulate(row.run_accuracy.begin(), row.run_accuracy.end(), 0.0) /
               static_cast<double>(k);
    row.stddev = 0.0;
    if (k > 1) {
        double ss = 0.0;
        for (const double a : row.run_accuracy) ss += (a - row.mean) * (a - row.mean);
        row.stddev = std::sqrt(ss / static_cast<double>(k - 1));
    }
}

struct SweepPlan {
    Model* attack_model = nullptr;         // queried for gradients
    const Model* defense_model = nullptr;  // produces the scored prediction
    LayerMode attack_mode = LayerMode::Deterministic;
    LayerMode defense_mode = LayerMode::Deterministic;
};

RobustnessTable sweep_impl(const SweepPlan& plan, const Dataset& eval_set,
                           const ExperimentConfig& config) {
    if (eval_set.empty()) throw std::invalid_argument("sweep: empty evaluation set");
    if (config.n_runs < 1) throw std::invalid_argument("sweep: n_runs must be positive");
    const Index total = static_cast<Index>(eval_set.size());
    const Index limit =
        config.eval_examples > 0 ? std::min(config.eval_examples, total) : total;

    RobustnessTable table;
    table.n_runs = config.n_runs;
    table.examples = limit;
    table.rows.push_back({"clean", 0.0, {}, 0.0, 0.0});
    for (const double eps : config.epsilon_list)
        table.rows.push_back({config.attack, eps, {}, 0.0, 0.0});

    for (std::size_t row_idx = 0; row_idx < table.rows.size(); ++row_idx) {
        SweepRow& row = table.rows[row_idx];
        for (Index run = 0; run < config.n_runs; ++run) {
            // Defense draws depend only on the run, never the row, so an
            // epsilon = 0 row scores exactly like the clean row.
            Rng defense_rng(
                derive_seed(derive_seed(config.seed, kDefenseStream), static_cast<std::uint64_t>(run)));
            Rng attack_rng(derive_seed(
                derive_seed(config.seed, kAttackStream + static_cast<std::uint64_t>(row_idx)),
                static_cast<std::uint64_t>(run)));
            Index correct = 0;
            for (Index i = 0; i < limit; ++i) {
                const Example& ex = eval_set[static_cast<std::size_t>(i)];
                Tensord x_eval = ex.x;
                if (row.epsilon255 > 0.0)
                    x_eval = run_attack(*plan.attack_model, ex.x, ex.label, row.attack,
                                        row.epsilon255, config, plan.attack_mode, attack_rng)
                                 .x_adv;
                ForwardOptions fo;
                fo.mode = plan.defense_mode;
                Rng* drng = plan.defense_mode == LayerMode::Randomized ? &defense_rng : nullptr;
                correct += predict(*plan.defense_model, x_eval, fo, drng) == ex.label;
            }
            row.run_accuracy.push_back(100.0 * static_cast<double>(correct) /
                                       static_cast<double>(limit));
        }
        finalize_row(row);
    }
    return table;
}

std::string format_double(double v) {
    char buf[40];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw std::logic_error("float formatting failed");
    return std::string(buf, end);
}

double parse_csv_double(const std::string& field, const std::string& what) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc{} || ptr != field.data() + field.size())
        throw std::runtime_error("csv: bad " + what + " value '" + field + "'");
    return v;
}

Index parse_csv_index(const std::string& field, const std::string& what) {
    Index v = 0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc{} || ptr != field.data() + field.size())
        throw std::runtime_error("csv: bad " + what + " value '" + field + "'");
    return v;
}

std::vector<std::string> split_on(const std::string& line, char sep) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, sep)) fields.push_back(field);
    if (!line.empty() && line.back() == sep) fields.emplace_back();
    return fields;
}

}  // namespace

Dataset make_dataset(const ExperimentConfig& config) {
    if (config.dataset == "synthetic-images") {
        if (config.input_shape.size() != 3 || config.input_shape[0] != 1)
            throw std::invalid_argument("dataset: synthetic images need input_shape = 1,H,W");
        SyntheticImagesSource source;
        source.classes = config.classes;
        source.height = config.input_shape[1];
        source.width = config.input_shape[2];
        source.count = config.dataset_count;
        source.contrast = config.contrast;
        source.jitter = config.jitter;
        source.noise = config.data_noise;
        source.seed = derive_seed(config.seed, kDataStream);
        return make_synthetic_images(source);
    }
    if (config.dataset == "synthetic-1d") {
        if (config.input_shape.size() != 3 || config.input_shape[0] != 1 ||
            config.input_shape[1] != 1)
            throw std::invalid_argument("dataset: synthetic 1d needs input_shape = 1,1,L");
        Synthetic1dSource source;
        source.classes = config.classes;
        source.length = config.input_shape[2];
        source.count = config.dataset_count;
        source.noise = config.data_noise;
        source.seed = derive_seed(config.seed, kDataStream);
        return make_synthetic_1d(source);
    }
    if (config.dataset == "idx") {
        if (config.idx_images.empty() || config.idx_labels.empty())
            throw std::invalid_argument("dataset: idx needs idx_images and idx_labels paths");
        return load_idx(config.idx_images, config.idx_labels);
    }
    throw std::invalid_argument("dataset: unknown source '" + config.dataset + "'");
}

Model train_model(const ExperimentConfig& config, const Dataset& train_set, TrainLog* log) {
    if (train_set.empty()) throw std::invalid_argument("train: empty training set");
    if (config.batch_size < 1) throw std::invalid_argument("train: batch_size must be positive");
    if (config.epochs < 0) throw std::invalid_argument("train: epochs must be non-negative");
    for (const auto& ex : train_set)
        if (ex.label < 0 || ex.label >= config.classes)
            throw std::runtime_error("train: label outside the configured class count");

    ModelSpec spec = build_model(config.model, model_options(config));
    const std::uint64_t init_seed = derive_seed(config.seed, kInitStream);

    if (spec.theta < 1.0) {
        // Warm up the identical parametrization with dropout off, then
        // fine-tune with masks live.
        ModelSpec warm = spec;
        warm.theta = 1.0;
        Model base{std::move(warm)};
        base.init_params(init_seed);
        const Index warm_epochs =
            config.pretrain_epochs > 0 ? config.pretrain_epochs : config.epochs;
        train_loop(base, config, train_set, warm_epochs, derive_seed(config.seed, kPretrainStream),
                   nullptr);
        Model tuned{std::move(spec)};
        copy_parameters(base, tuned);
        train_loop(tuned, config, train_set, config.epochs, derive_seed(config.seed, kMainStream),
                   log);
        return tuned;
    }

    Model model{std::move(spec)};
    model.init_params(init_seed);
    train_loop(model, config, train_set, config.epochs, derive_seed(config.seed, kMainStream), log);
    return model;
}

double evaluate_accuracy(const Model& model, const Dataset& data, LayerMode mode, Rng* rng,
                         Index limit) {
    if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
    const Index total = static_cast<Index>(data.size());
    const Index n = limit > 0 ? std::min(limit, total) : total;
    Index correct = 0;
    ForwardOptions fo;
    fo.mode = mode;
    for (Index i = 0; i < n; ++i) {
        const Example& ex = data[static_cast<std::size_t>(i)];
        correct += predict(model, ex.x, fo, rng) == ex.label;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

AttackResult run_attack(Model& model, const Tensord& x, Index label, const std::string& name,
                        double epsilon255, const ExperimentConfig& config, LayerMode naive_mode,
                        Rng& rng) {
    if (epsilon255 <= 0.0) {
        // Degenerate budget: the input is returned unchanged and success means
        // it was already misclassified.
        AttackConfig a;
        a.epsilon = 0.0;
        a.step_size = 0.0;
        const auto [lo, hi] = input_bounds(config);
        a.pixel_low = lo;
        a.pixel_high = hi;
        a.mode = naive_mode;
        return fgsm(model, x, label, a, &rng);
    }
    const AttackConfig a = build_attack_config(config, name, epsilon255, naive_mode);
    if (name == "fgsm") return fgsm(model, x, label, a, &rng);
    if (name == "bim") return bim(model, x, label, a, &rng);
    if (name == "pgd") return pgd(model, x, label, a, &rng);
    return bpda_pgd(model, x, label, a, rng);  // build_attack_config rejected other names
}

RobustnessTable robustness_sweep(Model& model, const Dataset& eval_set,
                                 const ExperimentConfig& config) {
    const bool randomized = model.spec().theta < 1.0;
    SweepPlan plan;
    plan.attack_model = &model;
    plan.defense_model = &model;
    plan.attack_mode = randomized ? LayerMode::Randomized : LayerMode::Deterministic;
    plan.defense_mode = plan.attack_mode;
    return sweep_impl(plan, eval_set, config);
}

RobustnessTable omniscient_eval(Model& model, const Dataset& eval_set,
                                const ExperimentConfig& config) {
    if (model.tucker_conv_count() == 0)
        throw std::invalid_argument("omniscient: the model has no latent cores to randomize");
    if (config.attack == "bpda")
        throw std::invalid_argument(
            "omniscient: the attacker already has exact gradients; bpda does not apply");
    const double theta_defense = config.theta_eval >= 0.0 ? config.theta_eval : model.spec().theta;
    if (theta_defense < 0.0 || theta_defense > 1.0)
        throw std::invalid_argument("omniscient: theta_eval must be in [0, 1]");

    ModelSpec defense_spec = model.spec();
    defense_spec.theta = theta_defense;
    Model defense{std::move(defense_spec)};
    copy_parameters(model, defense);

    SweepPlan plan;
    plan.attack_model = &model;
    plan.defense_model = &defense;
    plan.attack_mode = LayerMode::Deterministic;
    plan.defense_mode = LayerMode::Randomized;
    return sweep_impl(plan, eval_set, config);
}

namespace {
double grid_coord(Index i, Index n, double range) {
    // Symmetric form: the midpoint of an odd grid is exactly zero for any range.
    return range * (2.0 * static_cast<double>(i) - static_cast<double>(n - 1)) /
           static_cast<double>(n - 1);
}
}  // namespace

LandscapeGrid loss_landscape(Model& model, const Tensord& x, Index label, Index n, double range,
                             std::uint64_t direction_seed) {
    if (n < 2) throw std::invalid_argument("landscape: need at least a 2x2 grid");
    if (range <= 0.0) throw std::invalid_argument("landscape: range must be positive");

    LandscapeGrid grid;
    grid.n = n;
    grid.range = range;
    grid.d_grad = input_gradient(model, x, label, LayerMode::Deterministic, nullptr,
                                 &grid.clean_loss);
    double norm2 = 0.0;
    for (Index i = 0; i < grid.d_grad.size(); ++i) norm2 += grid.d_grad[i] * grid.d_grad[i];
    if (norm2 == 0.0)
        throw NumericError("landscape: the input gradient vanishes at the center point");
    const double inv_norm = 1.0 / std::sqrt(norm2);
    for (Index i = 0; i < grid.d_grad.size(); ++i) grid.d_grad[i] *= inv_norm;

    Rng rng(direction_seed);
    grid.d_orth = Tensord(x.shape());
    double onorm = 0.0;
    do {
        for (Index i = 0; i < grid.d_orth.size(); ++i) grid.d_orth[i] = rng.normal();
        double dot = 0.0;
        for (Index i = 0; i < grid.d_orth.size(); ++i) dot += grid.d_orth[i] * grid.d_grad[i];
        for (Index i = 0; i < grid.d_orth.size(); ++i) grid.d_orth[i] -= dot * grid.d_grad[i];
        double s = 0.0;
        for (Index i = 0; i < grid.d_orth.size(); ++i) s += grid.d_orth[i] * grid.d_orth[i];
        onorm = std::sqrt(s);
    } while (onorm < 1e-8);
    for (Index i = 0; i < grid.d_orth.size(); ++i) grid.d_orth[i] /= onorm;

    grid.loss = Matrixd(n, n);
    Tensord point(x.shape());
    ForwardOptions fo;  // deterministic surface
    for (Index i = 0; i < n; ++i) {
        const double u = grid_coord(i, n, range);
        for (Index j = 0; j < n; ++j) {
            const double v = grid_coord(j, n, range);
            for (Index k = 0; k < x.size(); ++k)
                point[k] = x[k] + (u * grid.d_grad[k] + v * grid.d_orth[k]);
            grid.loss(i, j) = cross_entropy(model.forward(point, fo).logits, label);
        }
    }
    return grid;
}

void write_landscape_csv(std::ostream& out, const LandscapeGrid& grid) {
    out << "u,v,loss\n";
    for (Index i = 0; i < grid.n; ++i) {
        const double u = grid_coord(i, grid.n, grid.range);
        for (Index j = 0; j < grid.n; ++j) {
            const double v = grid_coord(j, grid.n, grid.range);
            out << format_double(u) << ',' << format_double(v) << ','
                << format_double(grid.loss(i, j)) << '\n';
        }
    }
}

void write_table_csv(std::ostream& out, const RobustnessTable& table) {
    out << "attack,epsilon,mean,stddev,runs,examples,accuracies\n";
    for (const auto& row : table.rows) {
        out << row.attack << ',' << format_double(row.epsilon255) << ',' << format_double(row.mean)
            << ',' << format_double(row.stddev) << ',' << table.n_runs << ',' << table.examples
            << ',';
        for (std::size_t k = 0; k < row.run_accuracy.size(); ++k) {
            if (k) out << ';';
            out << format_double(row.run_accuracy[k]);
        }
        out << '\n';
    }
}

RobustnessTable parse_table_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "attack,epsilon,mean,stddev,runs,examples,accuracies")
        throw std::runtime_error("csv: missing or unexpected header");
    RobustnessTable table;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto fields = split_on(line, ',');
        if (fields.size() != 7) throw std::runtime_error("csv: expected 7 fields per row");
        SweepRow row;
        row.attack = fields[0];
        row.epsilon255 = parse_csv_double(fields[1], "epsilon");
        row.mean = parse_csv_double(fields[2], "mean");
        row.stddev = parse_csv_double(fields[3], "stddev");
        const Index runs = parse_csv_index(fields[4], "runs");
        const Index examples = parse_csv_index(fields[5], "examples");
        for (const auto& item : split_on(fields[6], ';'))
            row.run_accuracy.push_back(parse_csv_double(item, "accuracy"));
        if (static_cast<Index>(row.run_accuracy.size()) != runs)
            throw std::runtime_error("csv: run count does not match the accuracies column");
        if (first) {
            table.n_runs = runs;
            table.examples = examples;
            first = false;
        } else if (runs != table.n_runs || examples != table.examples) {
            throw std::runtime_error("csv: inconsistent runs/examples across rows");
        }
        table.rows.push_back(std::move(row));
    }
    if (table.rows.empty()) throw std::runtime_error("csv: no data rows");
    return table;
}

std::string render_table_text(const RobustnessTable& table) {
    std::ostringstream out;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-8s %8s %10s %8s   (%lld runs, %lld examples)\n", "attack",
                  "epsilon", "mean", "std", static_cast<long long>(table.n_runs),
                  static_cast<long long>(table.examples));
    out << buf;
    for (const auto& row : table.rows) {
        std::snprintf(buf, sizeof(buf), "%-8s %8.3g %9.2f%% %8.2f\n", row.attack.c_str(),
                      row.epsilon255, row.mean, row.stddev);
        out << buf;
    }
    return out.str();
}

}  // namespace deften
