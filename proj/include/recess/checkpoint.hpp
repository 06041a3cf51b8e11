#pragma once

#include <filesystem>

#include "recess/model.hpp"

namespace recess::model {

inline constexpr char kCheckpointMagic[8] = {'R', 'C', 'A', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout: 8-byte magic, u32 version, u64 header length, JSON header
/// (format tag, ModelConfig, tensor table), then little-endian float32 data.
void save_checkpoint(const Network<float>& net, const std::filesystem::path& path, const json& extra = {});

struct LoadedCheckpoint {
    Network<float> network;
    json extra;
};

/// Throws IoError for unreadable files and ValidationError for foreign or corrupt content.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace recess::model
