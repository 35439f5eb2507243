#include "deften/cli.hpp"

#include "deften/checkpoint.hpp"
#include "deften/harness.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace deften {

namespace {

// CLI-side rng streams; disjoint from the harness-internal training streams.
constexpr std::uint64_t kCliAttackStream = 0xC11A;
constexpr std::uint64_t kCliEvalStream = 0xC11E;
constexpr std::uint64_t kCliDirectionStream = 0xC11D;

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    // Overrides arrive as strings and go through the same whitelist as config
    // files, so one parser owns all value validation.
    std::string theta, epsilon_list, attack, seed, out, checkpoint;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config file (key = value lines)");
    cmd->add_option("--set", args.sets, "override any config key, as key=value (repeatable)");
    cmd->add_option("--theta", args.theta, "keep-probability for latent dropout");
    cmd->add_option("--epsilon-list", args.epsilon_list,
                    "attack budgets in 0-255 units, comma separated");
    cmd->add_option("--attack", args.attack, "attack: fgsm | bim | pgd | bpda");
    cmd->add_option("--seed", args.seed, "experiment seed");
    cmd->add_option("--out", args.out, "output directory (default $DEFTEN_OUT, else .)");
    cmd->add_option("--checkpoint", args.checkpoint, "checkpoint file to load");
}

ExperimentConfig build_config(const CommonArgs& args) {
    ExperimentConfig config =
        args.config_path.empty() ? ExperimentConfig{} : parse_config_file(args.config_path);
    for (const auto& kv : args.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
        apply_config_value(config, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!args.theta.empty()) apply_config_value(config, "theta", args.theta);
    if (!args.epsilon_list.empty()) apply_config_value(config, "epsilon_list", args.epsilon_list);
    if (!args.attack.empty()) apply_config_value(config, "attack", args.attack);
    if (!args.seed.empty()) apply_config_value(config, "seed", args.seed);
    if (!args.out.empty()) apply_config_value(config, "out_dir", args.out);
    if (!args.checkpoint.empty()) apply_config_value(config, "checkpoint", args.checkpoint);
    return config;
}

std::filesystem::path prepare_out_dir(const ExperimentConfig& config) {
    const std::filesystem::path dir = resolve_out_dir(config);
    std::filesystem::create_directories(dir);
    return dir;
}

Model load_required_checkpoint(const ExperimentConfig& config) {
    if (config.checkpoint.empty())
        throw std::runtime_error("a checkpoint is required (--checkpoint or checkpoint=...)");
    return load_checkpoint(config.checkpoint);
}

Dataset test_split(const ExperimentConfig& config) {
    return split_dataset(make_dataset(config), config.splits).test;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << content;
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

int do_train(const ExperimentConfig& config) {
    const auto out_dir = prepare_out_dir(config);
    const DataSplits splits = split_dataset(make_dataset(config), config.splits);

    TrainLog log;
    Model model = train_model(config, splits.train, &log);

    std::ofstream metrics(out_dir / "metrics.jsonl");
    for (std::size_t e = 0; e < log.loss.size(); ++e) {
        nlohmann::json line;
        line["epoch"] = e;
        line["loss"] = log.loss[e];
        line["accuracy"] = log.accuracy[e];
        metrics << line.dump() << '\n';
    }

    const std::string checkpoint_path = (out_dir / "checkpoint.bin").string();
    save_checkpoint(checkpoint_path, model, {config.epochs, config.seed});

    const bool randomized = model.spec().theta < 1.0;
    const LayerMode mode = randomized ? LayerMode::Randomized : LayerMode::Deterministic;
    Rng eval_rng(derive_seed(config.seed, kCliEvalStream));
    Rng* rng = randomized ? &eval_rng : nullptr;
    std::printf("train %.2f%% | val %.2f%% | test %.2f%%\n",
                evaluate_accuracy(model, splits.train, mode, rng),
                evaluate_accuracy(model, splits.val, mode, rng),
                evaluate_accuracy(model, splits.test, mode, rng));
    std::printf("checkpoint: %s\n", checkpoint_path.c_str());
    return 0;
}

int do_attack(const ExperimentConfig& config) {
    const auto out_dir = prepare_out_dir(config);
    Model model = load_required_checkpoint(config);
    const Dataset eval_set = test_split(config);
    const Index total = static_cast<Index>(eval_set.size());
    const Index limit = config.eval_examples > 0 ? std::min(config.eval_examples, total) : total;
    if (limit == 0) throw std::runtime_error("attack: empty evaluation set");

    const LayerMode naive_mode =
        model.spec().theta < 1.0 ? LayerMode::Randomized : LayerMode::Deterministic;
    Rng rng(derive_seed(config.seed, kCliAttackStream));

    std::ofstream records(out_dir / "records.jsonl");
    if (!records) throw std::runtime_error("cannot open records.jsonl for writing");
    for (const double eps : config.epsilon_list) {
        Index successes = 0;
        for (Index i = 0; i < limit; ++i) {
            const Example& ex = eval_set[static_cast<std::size_t>(i)];
            const AttackResult result =
                run_attack(model, ex.x, ex.label, config.attack, eps, config, naive_mode, rng);
            append_record(records, make_record(i, eps, config.attack, result));
            successes += result.success;
        }
        std::printf("%s eps=%g: %lld/%lld successful\n", config.attack.c_str(), eps,
                    static_cast<long long>(successes), static_cast<long long>(limit));
    }
    std::printf("records: %s\n", (out_dir / "records.jsonl").string().c_str());
    return 0;
}

int do_sweep(const ExperimentConfig& config) {
    const auto out_dir = prepare_out_dir(config);
    Model model = load_required_checkpoint(config);
    const RobustnessTable table = robustness_sweep(model, test_split(config), config);

    std::ostringstream csv;
    write_table_csv(csv, table);
    write_file(out_dir / "sweep.csv", csv.str());
    std::fputs(render_table_text(table).c_str(), stdout);
    std::printf("table: %s\n", (out_dir / "sweep.csv").string().c_str());
    return 0;
}

int do_omniscient(const ExperimentConfig& config) {
    const auto out_dir = prepare_out_dir(config);
    Model model = load_required_checkpoint(config);
    const RobustnessTable table = omniscient_eval(model, test_split(config), config);

    std::ostringstream csv;
    write_table_csv(csv, table);
    write_file(out_dir / "omniscient.csv", csv.str());
    std::fputs(render_table_text(table).c_str(), stdout);
    std::printf("table: %s\n", (out_dir / "omniscient.csv").string().c_str());
    return 0;
}

int do_landscape(const ExperimentConfig& config) {
    const auto out_dir = prepare_out_dir(config);
    Model model = load_required_checkpoint(config);
    const Dataset eval_set = test_split(config);
    if (config.landscape_index < 0 ||
        config.landscape_index >= static_cast<Index>(eval_set.size()))
        throw std::runtime_error("landscape: landscape_index is outside the test split");
    const Example& ex = eval_set[static_cast<std::size_t>(config.landscape_index)];

    const LandscapeGrid grid =
        loss_landscape(model, ex.x, ex.label, config.landscape_n, config.landscape_range,
                       derive_seed(config.seed, kCliDirectionStream));

    std::ostringstream csv;
    write_landscape_csv(csv, grid);
    write_file(out_dir / "landscape.csv", csv.str());
    std::printf("center loss %.6f over a %lldx%lld grid\n", grid.clean_loss,
                static_cast<long long>(grid.n), static_cast<long long>(grid.n));
    std::printf("grid: %s\n", (out_dir / "landscape.csv").string().c_str());
    return 0;
}

int do_report(const std::string& csv_path, const std::string& rewrite_path) {
    std::ifstream in(csv_path, std::ios::binary);
    if (!in) throw std::runtime_error("report: cannot open " + csv_path);
    const RobustnessTable table = parse_table_csv(in);
    std::fputs(render_table_text(table).c_str(), stdout);
    if (!rewrite_path.empty()) {
        std::ostringstream csv;
        write_table_csv(csv, table);
        write_file(rewrite_path, csv.str());
    }
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"latent tensor dropout: training, attacks, and evaluation"};
    app.require_subcommand(1);

    CommonArgs args;
    CLI::App* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
    CLI::App* attack_cmd =
        app.add_subcommand("attack", "attack test examples and write jsonl records");
    CLI::App* sweep_cmd =
        app.add_subcommand("sweep", "robust accuracy across attack budgets, averaged over runs");
    CLI::App* omniscient_cmd = app.add_subcommand(
        "omniscient", "deterministic-gradient attacks scored against the randomized defense");
    CLI::App* landscape_cmd =
        app.add_subcommand("landscape", "loss surface around a test example");
    CLI::App* report_cmd = app.add_subcommand("report", "render a sweep csv as a table");
    for (CLI::App* cmd : {train_cmd, attack_cmd, sweep_cmd, omniscient_cmd, landscape_cmd})
        add_common(cmd, args);

    std::string theta_eval, landscape_index;
    omniscient_cmd->add_option("--theta-eval", theta_eval,
                               "defense keep-probability (default: the model's theta)");
    landscape_cmd->add_option("--index", landscape_index, "test example to center on");

    std::string csv_path, rewrite_path;
    report_cmd->add_option("--csv", csv_path, "table csv to read")->required();
    report_cmd->add_option("--rewrite", rewrite_path, "write the parsed table back out as csv");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return 1;
    }

    try {
        if (report_cmd->parsed()) return do_report(csv_path, rewrite_path);
        ExperimentConfig config = build_config(args);
        if (!theta_eval.empty()) apply_config_value(config, "theta_eval", theta_eval);
        if (!landscape_index.empty()) apply_config_value(config, "landscape_index", landscape_index);
        if (train_cmd->parsed()) return do_train(config);
        if (attack_cmd->parsed()) return do_attack(config);
        if (sweep_cmd->parsed()) return do_sweep(config);
        if (omniscient_cmd->parsed()) return do_omniscient(config);
        if (landscape_cmd->parsed()) return do_landscape(config);
        std::cerr << app.help();
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}

}  // namespace deften
