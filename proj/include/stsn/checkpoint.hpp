#pragma once

#include <filesystem>
#include <stdexcept>
#include <utility>

#include "stsn/model.hpp"

namespace stsn {

// Checkpoint/config incompatibility (unknown version, unexpected tensor set,
// dims disagreement). I/O-level failures raise std::runtime_error instead.
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Binary layout, little-endian: magic "STCK", version u16, then the CRC'd
// payload: eight u32 ModelConfig fields, tensor count u32, and per tensor
// (name_len u16, name bytes, rank u16, dims u32[rank], f64 data); the file
// ends with the payload CRC32. Round-trips are bitwise lossless.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     ModelParams& params);

std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path);

}  // namespace stsn
