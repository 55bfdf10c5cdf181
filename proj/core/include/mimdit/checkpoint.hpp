#pragma once

#include <cstdint>
#include <string>

#include "mimdit/backbone.hpp"

namespace mimdit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout: magic "MIMD", version u32, model config text (length-prefixed),
/// tensor count u32, then (name, tensor) pairs in parameter order.
void save_checkpoint(const std::string& path, MiMDiT& model);

/// Rebuilds the model from the stored config and fills every named tensor.
MiMDiT load_checkpoint(const std::string& path);

/// As load_checkpoint, but throws ContractError naming the differing fields
/// when the stored config is not `expected`.
MiMDiT load_checkpoint(const std::string& path, const ModelConfig& expected);

ModelConfig read_checkpoint_config(const std::string& path);

}  // namespace mimdit
