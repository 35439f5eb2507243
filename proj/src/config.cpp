#include "deften/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace deften {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return {};
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: " + key + ": not a number: '" + value + "'");
    }
}

Index parse_index(const std::string& key, const std::string& value) {
    Index v = 0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc{} || ptr != value.data() + value.size())
        throw std::invalid_argument("config: " + key + ": not an integer: '" + value + "'");
    return v;
}

std::uint64_t parse_seed(const std::string& key, const std::string& value) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc{} || ptr != value.data() + value.size())
        throw std::invalid_argument("config: " + key + ": not an unsigned integer: '" + value + "'");
    return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw std::invalid_argument("config: " + key + ": expected true/false: '" + value + "'");
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> parts;
    std::string item;
    std::istringstream in(value);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) parts.push_back(item);
    }
    return parts;
}

std::vector<double> parse_double_list(const std::string& key, const std::string& value) {
    std::vector<double> out;
    for (const auto& item : split_list(value)) out.push_back(parse_double(key, item));
    return out;
}

std::vector<Index> parse_index_list(const std::string& key, const std::string& value) {
    std::vector<Index> out;
    for (const auto& item : split_list(value)) out.push_back(parse_index(key, item));
    return out;
}

Shape parse_shape(const std::string& key, const std::string& value) {
    Shape out;
    for (const auto& item : split_list(value)) out.push_back(parse_index(key, item));
    if (out.empty()) throw std::invalid_argument("config: " + key + ": empty shape");
    return out;
}

}  // namespace

void apply_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
    if (key == "model") c.model = value;
    else if (key == "kernel_kind") c.kernel_kind = value;
    else if (key == "rank_rule") c.rank_rule = value;
    else if (key == "first_conv_plain") c.first_conv_plain = parse_bool(key, value);
    else if (key == "theta") c.theta = parse_double(key, value);
    else if (key == "rescale") c.rescale = parse_bool(key, value);
    else if (key == "ste") c.ste = value;
    else if (key == "custom_layers") c.custom_layers = value;
    else if (key == "input_shape") c.input_shape = parse_shape(key, value);
    else if (key == "classes") c.classes = parse_index(key, value);
    else if (key == "conv_channels") c.conv_channels = parse_index_list(key, value);
    else if (key == "hidden") c.hidden = parse_index(key, value);
    else if (key == "learning_rate") c.learning_rate = parse_double(key, value);
    else if (key == "drop_epochs") c.drop_epochs = parse_index_list(key, value);
    else if (key == "drop_factor") c.drop_factor = parse_double(key, value);
    else if (key == "momentum") c.momentum = parse_double(key, value);
    else if (key == "weight_decay") c.weight_decay = parse_double(key, value);
    else if (key == "epochs") c.epochs = parse_index(key, value);
    else if (key == "batch_size") c.batch_size = parse_index(key, value);
    else if (key == "pretrain_epochs") c.pretrain_epochs = parse_index(key, value);
    else if (key == "train_epsilon_list") c.train_epsilon_list = parse_double_list(key, value);
    else if (key == "dataset") c.dataset = value;
    else if (key == "dataset_count") c.dataset_count = parse_index(key, value);
    else if (key == "contrast") c.contrast = parse_double(key, value);
    else if (key == "jitter") c.jitter = parse_double(key, value);
    else if (key == "data_noise") c.data_noise = parse_double(key, value);
    else if (key == "idx_images") c.idx_images = value;
    else if (key == "idx_labels") c.idx_labels = value;
    else if (key == "split_train") c.splits.train = parse_double(key, value);
    else if (key == "split_val") c.splits.val = parse_double(key, value);
    else if (key == "split_test") c.splits.test = parse_double(key, value);
    else if (key == "attack") c.attack = value;
    else if (key == "epsilon_list") c.epsilon_list = parse_double_list(key, value);
    else if (key == "eot_samples") c.eot_samples = parse_index(key, value);
    else if (key == "attack_iterations") c.attack_iterations = parse_index(key, value);
    else if (key == "n_runs") c.n_runs = parse_index(key, value);
    else if (key == "eval_examples") c.eval_examples = parse_index(key, value);
    else if (key == "theta_eval") c.theta_eval = parse_double(key, value);
    else if (key == "landscape_n") c.landscape_n = parse_index(key, value);
    else if (key == "landscape_range") c.landscape_range = parse_double(key, value);
    else if (key == "landscape_index") c.landscape_index = parse_index(key, value);
    else if (key == "seed") c.seed = parse_seed(key, value);
    else if (key == "out_dir") c.out_dir = value;
    else if (key == "checkpoint") c.checkpoint = value;
    else throw std::invalid_argument("config: unknown key '" + key + "'");
}

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig config;
    std::istringstream in(text);
    std::string line;
    Index line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                        ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw std::invalid_argument("config: line " + std::to_string(line_no) + ": empty key");
        apply_config_value(config, key, value);
    }
    return config;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_config_text(buffer.str());
}

SteVariant parse_ste(const std::string& name) {
    if (name == "clipped" || name == "clipped-identity") return SteVariant::ClippedIdentity;
    if (name == "tanh") return SteVariant::Tanh;
    if (name == "tanh-scaled") return SteVariant::TanhScaled;
    throw std::invalid_argument("config: unknown ste variant '" + name + "'");
}

ModelOptions model_options(const ExperimentConfig& c) {
    ModelOptions options;
    options.input_shape = c.input_shape;
    options.classes = c.classes;
    options.conv_channels = c.conv_channels;
    options.hidden = c.hidden;
    options.theta = c.theta;
    options.rescale = c.rescale;
    options.ste = parse_ste(c.ste);
    options.kernel_kind = c.kernel_kind;
    options.rank_rule = c.rank_rule;
    options.first_conv_plain = c.first_conv_plain;
    options.custom_layers = c.custom_layers;
    return options;
}

OptimizerConfig optimizer_config(const ExperimentConfig& c) {
    OptimizerConfig out;
    out.learning_rate = c.learning_rate;
    out.drop_epochs = c.drop_epochs;
    out.drop_factor = c.drop_factor;
    out.momentum = c.momentum;
    out.weight_decay = c.weight_decay;
    return out;
}

std::string resolve_out_dir(const ExperimentConfig& config) {
    if (!config.out_dir.empty()) return config.out_dir;
    if (const char* env = std::getenv("DEFTEN_OUT"); env && *env) return env;
    return ".";
}

}  // namespace deften
