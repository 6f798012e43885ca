#pragma once

#include "echoprompt/nn.hpp"

#include <cstdint>
#include <vector>

namespace echoprompt {

struct BackboneConfig {
    std::size_t depth = 3;
    std::size_t base_channels = 16;
    std::size_t embed_dim = 64;
    std::size_t decoder_channels = 8;
    std::size_t in_channels = 1;
};

/// Factorised 2D-t block: 3x3 spatial conv, ReLU, 3-tap temporal conv and
/// an optional output ReLU.
struct ConvBlock {
    ag::Var spatial_weight, spatial_bias, temporal_weight, temporal_bias;

    static ConvBlock create(std::size_t in_channels, std::size_t out_channels, CounterRng& rng);
    ag::Var forward(const ag::Var& x, bool relu_out = true) const;
    void collect(const std::string& prefix, std::vector<NamedParam>& out) const;
};

/// Encoder outputs, shallowest first; the last level is the bottleneck.
struct FeaturePyramid {
    std::vector<ag::Var> levels;

    const ag::Var& bottleneck() const { return levels.back(); }
    std::size_t embed_dim() const { return bottleneck().value().channels(); }
};

/// U-Net style encoder/decoder over [T, H, W, C] clips. Downsampling is
/// spatial only, so every level keeps all T frames.
class VideoBackbone {
public:
    /// `score_channels` extra channels are expected at the bottleneck by decode().
    VideoBackbone(const BackboneConfig& config, std::size_t score_channels, CounterRng rng);

    /// Throws InvalidArgument unless the clip is [T, H, W, in_channels] with
    /// H and W divisible by 2^depth.
    void check_input(const Shape& shape) const;

    FeaturePyramid encode(const ag::Var& video) const;
    ag::Var decode(const FeaturePyramid& pyramid, const ag::Var& fused_bottleneck) const;

    std::size_t fused_channels() const noexcept { return config_.embed_dim + score_channels_; }
    std::size_t score_channels() const noexcept { return score_channels_; }
    const BackboneConfig& config() const noexcept { return config_; }
    std::vector<NamedParam> parameters() const;

private:
    BackboneConfig config_;
    std::size_t score_channels_;
    std::vector<ConvBlock> encoder_;  // depth levels + bottleneck
    std::vector<ConvBlock> decoder_;  // decoder_[i] produces level i
};

/// Spatio-temporal mean of the bottleneck -> [D].
ag::Var global_embedding(const FeaturePyramid& pyramid);

} // namespace echoprompt
