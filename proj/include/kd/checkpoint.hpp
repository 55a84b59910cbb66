#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kd/model.hpp"

namespace kd::train {

// Layout: "CBCK" | u32 LE version | u32 LE header length | UTF-8 JSON header
// | f64 LE payloads in header order. The header holds the model config and
// the ordered (name, shape) list.
inline constexpr char kCheckpointMagic[4] = {'C', 'B', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const model::Weights& weights);
model::Weights deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Throws IoError when the file cannot be written.
void save_checkpoint(const model::Weights& weights, const std::filesystem::path& path);
/// Throws IoError (unreadable) or FormatError (corrupt); never returns partial weights.
model::Weights load_checkpoint(const std::filesystem::path& path);

}  // namespace kd::train
