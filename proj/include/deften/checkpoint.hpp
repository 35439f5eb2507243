#pragma once

#include "deften/nn.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>

namespace deften {

// Checkpoint file: one JSON manifest line carrying the full model description,
// training epoch, and the seeds that produced the run, followed by one tensor
// block per parameter in model order. Loading rebuilds the model from the
// manifest alone, so a checkpoint is replayable without its config file.
struct CheckpointInfo {
    Index epoch = 0;             // epochs completed when saved
    std::uint64_t seed = 0;      // experiment seed every rng stream derives from
};

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

void save_checkpoint(const std::string& path, const Model& model, const CheckpointInfo& info);

// Throws std::runtime_error on unreadable files, manifest/tensor mismatches,
// or parameter shapes that disagree with the manifest's model description.
Model load_checkpoint(const std::string& path, CheckpointInfo* info = nullptr);

}  // namespace deften
