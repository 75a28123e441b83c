#pragma once

#include <filesystem>

#include "threemt/model.hpp"

namespace threemt {

// Binary layout: "3MT1", u32 version, u32 metadata length, JSON metadata
// (config, modality specs, ordinal normalization), then until end of file one
// record per parameter: u32 name length, name, u32 rank, u32 dims, f32 values.
// All integers and floats little endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ThreeMTModel<float>& model);
ThreeMTModel<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace threemt
