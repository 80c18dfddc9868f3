#pragma once

#include <memory>
#include <string>

#include "mrir/model.hpp"

// Archive layout, little-endian throughout:
//   "MRIRCKPT"  u32 version
//   u64 n, n bytes of config JSON
//   u64 entry count, then per entry:
//     u32 name length, name bytes, u32 rank, rank x u32 dims, numel x f32 values
namespace mrir::checkpoint {

constexpr std::uint32_t kVersion = 1;

void save(const std::string& path, const MrirModel& model);

// Rebuilds the model from the stored config and fills every parameter. Throws
// InputError on a malformed archive or a parameter set that differs from the model.
std::unique_ptr<MrirModel> load(const std::string& path);

// Stored config only.
Config load_config(const std::string& path);

}  // namespace mrir::checkpoint
