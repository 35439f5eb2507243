#pragma once

#include "deften/dataset.hpp"
#include "deften/nn.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace deften {

// One experiment, parsed from a `key = value` config file plus command-line
// overrides. Every knob the harness exposes lives here so a run is fully
// described by (config, seed) and can be replayed bit for bit.
struct ExperimentConfig {
    // model
    std::string model = "small-cnn-2d";  // small-cnn-2d | soundnet5-1d | custom
    std::string kernel_kind = "plain";   // plain | tucker | binary
    std::string rank_rule = "spatial-full";
    bool first_conv_plain = true;
    double theta = 1.0;
    bool rescale = false;
    std::string ste = "clipped";  // clipped | tanh | tanh-scaled
    std::string custom_layers;    // layer string for model = custom
    Shape input_shape = {1, 8, 8};
    Index classes = 4;
    std::vector<Index> conv_channels = {8, 16, 32};
    Index hidden = 32;

    // optimizer / training
    double learning_rate = 0.01;
    std::vector<Index> drop_epochs = {150, 250};
    double drop_factor = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-6;
    Index epochs = 30;
    Index batch_size = 16;
    Index pretrain_epochs = 0;  // theta<1 warmup at theta=1; 0 means `epochs`
    std::vector<double> train_epsilon_list;  // non-empty enables adversarial training (0-255 units)

    // data
    std::string dataset = "synthetic-images";  // synthetic-images | synthetic-1d | idx
    Index dataset_count = 1000;
    double contrast = 0.25;
    double jitter = 0.15;
    double data_noise = 0.1;
    std::string idx_images, idx_labels;
    SplitFractions splits;

    // attacks / evaluation
    std::string attack = "fgsm";  // fgsm | bim | pgd | bpda
    std::vector<double> epsilon_list = {2, 4, 8, 16};  // 0-255 units
    Index eot_samples = 10;
    Index attack_iterations = 0;  // 0 means the published step schedule
    Index n_runs = 10;
    Index eval_examples = 0;  // 0 means the whole test split
    double theta_eval = -1.0;  // defense theta for omniscient eval; <0 means model theta

    // loss landscape
    Index landscape_n = 41;
    double landscape_range = 0.5;
    Index landscape_index = 0;  // which test example to center on

    // plumbing
    std::uint64_t seed = 1;
    std::string out_dir;     // empty: $DEFTEN_OUT, else "."
    std::string checkpoint;  // input checkpoint for attack/sweep/omniscient/landscape
};

// Parses `key = value` lines ('#' starts a comment, blank lines ignored).
// Unknown keys and malformed values throw std::invalid_argument: configs are
// whitelisted so a typo fails loudly instead of silently running defaults.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

// Applies one `key`/`value` pair (same whitelist as the file parser).
void apply_config_value(ExperimentConfig& config, const std::string& key,
                        const std::string& value);

// Derived views of the config.
ModelOptions model_options(const ExperimentConfig& config);
OptimizerConfig optimizer_config(const ExperimentConfig& config);
SteVariant parse_ste(const std::string& name);

// Resolves the output directory: config value, else $DEFTEN_OUT, else ".".
std::string resolve_out_dir(const ExperimentConfig& config);

}  // namespace deften
