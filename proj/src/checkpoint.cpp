#include "deften/checkpoint.hpp"

#include "deften/serialize.hpp"

#include <fstream>
#include <stdexcept>

namespace deften {

namespace {

std::string ste_name(SteVariant v) {
    switch (v) {
        case SteVariant::ClippedIdentity: return "clipped";
        case SteVariant::Tanh: return "tanh";
        case SteVariant::TanhScaled: return "tanh-scaled";
    }
    throw std::logic_error("unhandled ste variant");
}

SteVariant ste_from_name(const std::string& name) {
    if (name == "clipped") return SteVariant::ClippedIdentity;
    if (name == "tanh") return SteVariant::Tanh;
    if (name == "tanh-scaled") return SteVariant::TanhScaled;
    throw std::runtime_error("checkpoint: unknown ste variant '" + name + "'");
}

std::string layer_type_name(LayerSpec::Type t) {
    switch (t) {
        case LayerSpec::Type::Conv: return "conv";
        case LayerSpec::Type::Relu: return "relu";
        case LayerSpec::Type::Pool: return "pool";
        case LayerSpec::Type::Flatten: return "flatten";
        case LayerSpec::Type::Linear: return "linear";
    }
    throw std::logic_error("unhandled layer type");
}

LayerSpec::Type layer_type_from_name(const std::string& name) {
    if (name == "conv") return LayerSpec::Type::Conv;
    if (name == "relu") return LayerSpec::Type::Relu;
    if (name == "pool") return LayerSpec::Type::Pool;
    if (name == "flatten") return LayerSpec::Type::Flatten;
    if (name == "linear") return LayerSpec::Type::Linear;
    throw std::runtime_error("checkpoint: unknown layer type '" + name + "'");
}

}  // namespace

nlohmann::json spec_to_json(const ModelSpec& spec) {
    nlohmann::json j;
    j["input_shape"] = spec.input_shape;
    j["classes"] = spec.classes;
    j["theta"] = spec.theta;
    j["rescale"] = spec.rescale;
    j["ste"] = ste_name(spec.ste);
    j["layers"] = nlohmann::json::array();
    for (const auto& layer : spec.layers) {
        nlohmann::json l;
        l["type"] = layer_type_name(layer.type);
        switch (layer.type) {
            case LayerSpec::Type::Conv:
                l["out_channels"] = layer.out_channels;
                l["kernel_h"] = layer.kernel_h;
                l["kernel_w"] = layer.kernel_w;
                l["stride_h"] = layer.meta.stride_h;
                l["stride_w"] = layer.meta.stride_w;
                l["pad_h"] = layer.meta.pad_h;
                l["pad_w"] = layer.meta.pad_w;
                l["tucker_ranks"] = layer.tucker_ranks;
                l["binarized"] = layer.binarized;
                break;
            case LayerSpec::Type::Pool:
                l["pool_h"] = layer.pool_h;
                l["pool_w"] = layer.pool_w;
                break;
            case LayerSpec::Type::Linear:
                l["out_features"] = layer.out_features;
                break;
            default:
                break;
        }
        j["layers"].push_back(std::move(l));
    }
    return j;
}

ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec spec;
    spec.input_shape = j.at("input_shape").get<Shape>();
    spec.classes = j.at("classes").get<Index>();
    spec.theta = j.at("theta").get<double>();
    spec.rescale = j.at("rescale").get<bool>();
    spec.ste = ste_from_name(j.at("ste").get<std::string>());
    for (const auto& l : j.at("layers")) {
        LayerSpec layer;
        layer.type = layer_type_from_name(l.at("type").get<std::string>());
        switch (layer.type) {
            case LayerSpec::Type::Conv:
                layer.out_channels = l.at("out_channels").get<Index>();
                layer.kernel_h = l.at("kernel_h").get<Index>();
                layer.kernel_w = l.at("kernel_w").get<Index>();
                layer.meta.stride_h = l.at("stride_h").get<Index>();
                layer.meta.stride_w = l.at("stride_w").get<Index>();
                layer.meta.pad_h = l.at("pad_h").get<Index>();
                layer.meta.pad_w = l.at("pad_w").get<Index>();
                layer.tucker_ranks = l.at("tucker_ranks").get<Shape>();
                layer.binarized = l.at("binarized").get<bool>();
                break;
            case LayerSpec::Type::Pool:
                layer.pool_h = l.at("pool_h").get<Index>();
                layer.pool_w = l.at("pool_w").get<Index>();
                break;
            case LayerSpec::Type::Linear:
                layer.out_features = l.at("out_features").get<Index>();
                break;
            default:
                break;
        }
        spec.layers.push_back(std::move(layer));
    }
    return spec;
}

void save_checkpoint(const std::string& path, const Model& model, const CheckpointInfo& info) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");

    const auto params = model.parameters();
    nlohmann::json manifest;
    manifest["format"] = "deften-checkpoint";
    manifest["version"] = 1;
    manifest["epoch"] = info.epoch;
    manifest["seed"] = info.seed;
    manifest["model"] = spec_to_json(model.spec());
    manifest["tensors"] = params.size();
    out << manifest.dump() << '\n';
    for (const auto* p : params) write_tensor(out, p->value, p->name);
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Model load_checkpoint(const std::string& path, CheckpointInfo* info) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);

    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("checkpoint: missing manifest line");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(std::string("checkpoint: manifest is not valid JSON: ") + e.what());
    }
    if (manifest.value("format", "") != "deften-checkpoint")
        throw std::runtime_error("checkpoint: " + path + " is not a checkpoint file");

    Model model(spec_from_json(manifest.at("model")));
    if (info) {
        info->epoch = manifest.at("epoch").get<Index>();
        info->seed = manifest.at("seed").get<std::uint64_t>();
    }

    const auto params = model.parameters();
    const auto count = manifest.at("tensors").get<std::size_t>();
    if (count != params.size())
        throw std::runtime_error("checkpoint: tensor count does not match the model manifest");
    for (auto* p : params) {
        NamedTensor named = read_tensor(in);
        if (named.name != p->name)
            throw std::runtime_error("checkpoint: expected tensor '" + p->name + "', found '" +
                                     named.name + "'");
        if (!named.tensor.same_shape(p->value))
            throw std::runtime_error("checkpoint: tensor '" + named.name +
                                     "' has the wrong shape");
        p->value = std::move(named.tensor);
    }
    return model;
}

}  // namespace deften
