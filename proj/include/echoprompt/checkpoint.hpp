#pragma once

#include "echoprompt/model.hpp"
#include "echoprompt/training.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

namespace echoprompt {

// Layout: "EPCK" | u32 version | u64 header length | header JSON (UTF-8) |
// u32 tensor count | per tensor: u32 name length, name, u32 rank, u64 dims,
// f64 values | u64 FNV-1a of every preceding byte. Integers and doubles are
// little-endian. The header holds the text class names, the text provider id
// and the training config (with the model config under "model").
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    TrainConfig config;
    std::unique_ptr<EchoPromptModel> model;
};

std::vector<std::uint8_t> encode_checkpoint(const EchoPromptModel& model, const TrainConfig& config);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const EchoPromptModel& model, const TrainConfig& config, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace echoprompt
