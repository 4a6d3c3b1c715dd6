#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "par/model.hpp"

namespace par {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ParameterSet<float> params;
};

// Layout (little-endian):
//   magic "PARCKPT\0", u32 version, u32 config length, config text (YAML),
//   u32 array count, then per array: u32 name length, name, u8 dtype (0 = f32),
//   u32 rank, u64 extents...; then every payload concatenated in manifest order.
std::vector<std::uint8_t> serialize_checkpoint(const ModelConfig& cfg, const ParameterSet<float>& params);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ParameterSet<float>& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Manifest lines "name dtype shape", one per array.
std::vector<std::string> manifest(const ParameterSet<float>& params);

}  // namespace par
