#pragma once

#include "deften/attacks.hpp"
#include "deften/config.hpp"
#include "deften/dataset.hpp"

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace deften {

// Thrown when a computation degenerates (e.g. a vanishing gradient where a
// direction is required) as opposed to bad inputs; the CLI maps it to its own
// exit code so scripted runs can tell the two apart.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Materializes the configured dataset. Synthetic sources are seeded from
// config.seed, so two configs that differ only in model knobs see identical
// data.
Dataset make_dataset(const ExperimentConfig& config);

struct TrainLog {
    std::vector<double> loss;      // mean per-example loss by epoch
    std::vector<double> accuracy;  // training accuracy % by epoch
};

// Trains a model described by the config on train_set. theta < 1 configs
// first train a theta = 1 twin of the same parametrization (pretrain_epochs,
// or `epochs` when 0) and fine-tune it with dropout enabled. A non-empty
// train_epsilon_list turns on adversarial training: each batch draws one
// epsilon (0-255 units) uniformly from the list and perturbs its examples
// with PGD at the published step schedule; epsilon 0 leaves a batch clean.
Model train_model(const ExperimentConfig& config, const Dataset& train_set,
                  TrainLog* log = nullptr);

// Accuracy % of argmax predictions over data (first `limit` examples, or all
// when limit is 0). Randomized mode draws fresh masks per example from rng.
double evaluate_accuracy(const Model& model, const Dataset& data, LayerMode mode,
                         Rng* rng = nullptr, Index limit = 0);

struct SweepRow {
    std::string attack;  // "clean" for the unattacked row
    double epsilon255 = 0.0;
    std::vector<double> run_accuracy;  // robust accuracy % per run
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation across runs
};

struct RobustnessTable {
    Index n_runs = 0;
    Index examples = 0;
    std::vector<SweepRow> rows;  // clean row first, then one per epsilon
};

// White-box sweep of config.attack over config.epsilon_list. Attacks query
// the model in its own inference mode (randomized when theta < 1); each run
// reseeds attack randomness per row and defense randomness per run, so the
// clean and epsilon = 0 rows see identical defense draws.
RobustnessTable robustness_sweep(Model& model, const Dataset& eval_set,
                                 const ExperimentConfig& config);

// Strongest-attacker variant: gradients are taken on the deterministic
// network (the attacker knows the weights exactly), while the defense is
// evaluated with dropout at config.theta_eval (model theta when < 0).
// Requires a tucker-parametrized model; theta_eval = 1 reproduces plain
// white-box deterministic evaluation.
RobustnessTable omniscient_eval(Model& model, const Dataset& eval_set,
                                const ExperimentConfig& config);

// Loss surface around x in the plane spanned by the normalized input
// gradient (deterministic mode) and a random unit direction orthogonalized
// against it. Grid coordinates run over [-range, range] in both axes; odd n
// puts the unperturbed point exactly at the center. Throws std::runtime_error
// when the input gradient vanishes.
struct LandscapeGrid {
    Index n = 0;
    double range = 0.0;
    Tensord d_grad, d_orth;
    Matrixd loss;  // loss(i, j) at u_i along d_grad, v_j along d_orth
    double clean_loss = 0.0;
};

LandscapeGrid loss_landscape(Model& model, const Tensord& x, Index label, Index n = 41,
                             double range = 0.5, std::uint64_t direction_seed = 1);

// CSV writers use shortest round-trip float formatting, so writing a parsed
// table reproduces the original file byte for byte.
void write_landscape_csv(std::ostream& out, const LandscapeGrid& grid);
void write_table_csv(std::ostream& out, const RobustnessTable& table);
RobustnessTable parse_table_csv(std::istream& in);
std::string render_table_text(const RobustnessTable& table);

// Runs one configured attack ("fgsm", "bim", "pgd", "bpda") at epsilon255
// (0-255 units) against a single example. naive_mode is the query mode for
// the gradient-based attacks; bpda always queries randomized.
AttackResult run_attack(Model& model, const Tensord& x, Index label, const std::string& name,
                        double epsilon255, const ExperimentConfig& config, LayerMode naive_mode,
                        Rng& rng);

}  // namespace deften
