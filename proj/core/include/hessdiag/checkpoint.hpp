#pragma once

#include <filesystem>
#include <string>

#include "hessdiag/models.hpp"

namespace hessdiag {

inline constexpr const char* kCheckpointMagic = "HDCKPT v1\n";
inline constexpr int kCheckpointFormatVersion = 1;

// Layout: the magic line, a little-endian uint64 header length, a JSON header
// (format tag, model config, parameter layout, group registry, parameter
// count), then the parameters as little-endian IEEE doubles.
void save_checkpoint(const Model& model, const std::filesystem::path& path);

// Rebuilds the model from the header config and checks that the stored
// layout and registry match the rebuilt ones before loading parameters.
Model load_checkpoint(const std::filesystem::path& path);

// The JSON header only, for inspection.
std::string read_checkpoint_header(const std::filesystem::path& path);

}  // namespace hessdiag
