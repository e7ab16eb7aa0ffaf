#pragma once

// Binary checkpoint: "WSTB", version byte 1, u32-LE length-prefixed JSON of
// the network config and the training config, u32 tensor count, then each
// tensor of ModelParams::parameters() as u32 rank, u32 dims, f32-LE values.

#include <filesystem>

#include <nlohmann/json.hpp>

#include "wstab/network.hpp"

namespace wstab {

struct Checkpoint {
  NetConfig net;
  nlohmann::json train;  // training config as stored; opaque here
  ModelParams params;
};

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const NetConfig& net,
                     const nlohmann::json& train_config);

/// Throws FileNotFound, BadMagic, TruncatedFile, DecodeError (bad JSON or
/// version), ShapeMismatch (tensor shapes disagree with the stored config).
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace wstab
