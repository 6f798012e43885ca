#pragma once

#include "echoprompt/autograd.hpp"
#include "echoprompt/synthetic_data.hpp"
#include "echoprompt/text_prompts.hpp"

#include <cstdint>
#include <string_view>
#include <vector>

namespace echoprompt {

enum class PixelTextLossKind { softmax, sigmoid };

std::string_view to_string(PixelTextLossKind k) noexcept;
PixelTextLossKind parse_pixel_text_loss(std::string_view name);

struct PixelTextConfig {
    double temperature = 0.1;
    PixelTextLossKind kind = PixelTextLossKind::softmax;
};

/// Cosine between each normalised bottleneck position and every text row:
/// [T, Hb, Wb, D] -> [T, Hb, Wb, N + 1]. Zero-norm positions score 0.
ag::Var score_map(const ag::Var& bottleneck, const TextEmbeddingMatrix& text);

/// Labels resampled to the bottleneck grid by nearest neighbour.
struct LowResLabels {
    std::size_t frames = 0, height = 0, width = 0, foreground = 0;
    /// One class per position for the softmax loss: the lowest foreground
    /// class present, `foreground` (the background row) when none, -1 on
    /// unlabeled frames.
    std::vector<int> single;
    /// Multi-hot [positions, foreground] for the sigmoid variant.
    std::vector<std::uint8_t> multi;
    std::vector<std::uint8_t> valid;  // per position
};

LowResLabels downsample_labels(const VideoSample& sample, std::size_t height, std::size_t width);

/// Auxiliary low-resolution segmentation loss on scores / temperature.
ag::Var pixel_text_loss(const ag::Var& scores, const LowResLabels& labels, const PixelTextConfig& config);

/// Bottleneck features with the N foreground score channels appended.
ag::Var fuse(const ag::Var& scores, const ag::Var& bottleneck, std::size_t foreground);

} // namespace echoprompt
