#include "echoprompt/video_backbone.hpp"

#include "echoprompt/error.hpp"

#include <array>

namespace echoprompt {

ConvBlock ConvBlock::create(std::size_t in_channels, std::size_t out_channels, CounterRng& rng)
{
    ConvBlock b;
    b.spatial_weight = he_weight({9 * in_channels, out_channels}, 9 * in_channels, rng);
    b.spatial_bias = zero_param({out_channels});
    b.temporal_weight = he_weight({3 * out_channels, out_channels}, 3 * out_channels, rng);
    b.temporal_bias = zero_param({out_channels});
    return b;
}

ag::Var ConvBlock::forward(const ag::Var& x, bool relu_out) const
{
    ag::Var h = ag::relu(ag::conv_spatial3x3(x, spatial_weight, spatial_bias));
    h = ag::conv_temporal3(h, temporal_weight, temporal_bias);
    return relu_out ? ag::relu(h) : h;
}

void ConvBlock::collect(const std::string& prefix, std::vector<NamedParam>& out) const
{
    out.push_back({prefix + ".spatial.weight", spatial_weight});
    out.push_back({prefix + ".spatial.bias", spatial_bias});
    out.push_back({prefix + ".temporal.weight", temporal_weight});
    out.push_back({prefix + ".temporal.bias", temporal_bias});
}

VideoBackbone::VideoBackbone(const BackboneConfig& config, std::size_t score_channels, CounterRng rng)
    : config_(config), score_channels_(score_channels)
{
    if (config.depth == 0 || config.base_channels == 0 || config.embed_dim == 0 || config.decoder_channels == 0) {
        throw InvalidArgument("backbone: depth and channel counts must be positive");
    }
    std::vector<std::size_t> level_channels;
    std::size_t in = config.in_channels;
    for (std::size_t i = 0; i < config.depth; ++i) {
        const std::size_t out = config.base_channels << i;
        CounterRng r = rng.split("encoder").split(i);
        encoder_.push_back(ConvBlock::create(in, out, r));
        level_channels.push_back(out);
        in = out;
    }
    CounterRng bottleneck_rng = rng.split("encoder").split(config.depth);
    encoder_.push_back(ConvBlock::create(in, config.embed_dim, bottleneck_rng));

    decoder_.resize(config.depth);
    std::size_t prev = fused_channels();
    for (std::size_t i = config.depth; i-- > 0;) {
        const std::size_t out = i == 0 ? config.decoder_channels : config.base_channels << (i - 1);
        CounterRng r = rng.split("decoder").split(i);
        decoder_[i] = ConvBlock::create(prev + level_channels[i], out, r);
        prev = out;
    }
}

void VideoBackbone::check_input(const Shape& shape) const
{
    if (shape.size() != 4 || shape[3] != config_.in_channels || shape[0] == 0) {
        throw InvalidArgument("backbone: expected [T,H,W," + std::to_string(config_.in_channels) + "] input, got " +
                              shape_string(shape));
    }
    const std::size_t unit = std::size_t{1} << config_.depth;
    if (shape[1] % unit != 0 || shape[2] % unit != 0 || shape[1] == 0 || shape[2] == 0) {
        const std::size_t ph = (shape[1] + unit - 1) / unit * unit;
        const std::size_t pw = (shape[2] + unit - 1) / unit * unit;
        throw InvalidArgument("backbone: H and W must be divisible by 2^depth = " + std::to_string(unit) + "; pad " +
                              std::to_string(shape[1]) + "x" + std::to_string(shape[2]) + " to " +
                              std::to_string(ph) + "x" + std::to_string(pw));
    }
}

FeaturePyramid VideoBackbone::encode(const ag::Var& video) const
{
    check_input(video.shape());
    FeaturePyramid pyramid;
    ag::Var x = video;
    for (std::size_t i = 0; i < config_.depth; ++i) {
        x = encoder_[i].forward(x);
        pyramid.levels.push_back(x);
        x = ag::avg_pool2(x);
    }
    pyramid.levels.push_back(encoder_.back().forward(x));
    return pyramid;
}

ag::Var VideoBackbone::decode(const FeaturePyramid& pyramid, const ag::Var& fused_bottleneck) const
{
    if (pyramid.levels.size() != config_.depth + 1) {
        throw InvalidArgument("backbone: pyramid has " + std::to_string(pyramid.levels.size()) + " levels, expected " +
                              std::to_string(config_.depth + 1));
    }
    const Shape& fs = fused_bottleneck.shape();
    const Shape& bs = pyramid.bottleneck().shape();
    if (fs.size() != 4 || fs[3] != fused_channels() || fs[0] != bs[0] || fs[1] != bs[1] || fs[2] != bs[2]) {
        throw InvalidArgument("backbone: fused bottleneck " + shape_string(fs) + " does not match expected " +
                              std::to_string(fused_channels()) + " channels at " + shape_string(bs));
    }
    ag::Var x = fused_bottleneck;
    for (std::size_t i = config_.depth; i-- > 0;) {
        const std::array<ag::Var, 2> parts{ag::upsample2(x), pyramid.levels[i]};
        // The last block stays linear so the heads see signed features.
        x = decoder_[i].forward(ag::concat_channels(parts), i != 0);
    }
    return x;
}

std::vector<NamedParam> VideoBackbone::parameters() const
{
    std::vector<NamedParam> out;
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
        encoder_[i].collect("backbone.encoder" + std::to_string(i), out);
    }
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
        decoder_[i].collect("backbone.decoder" + std::to_string(i), out);
    }
    return out;
}

ag::Var global_embedding(const FeaturePyramid& pyramid) { return ag::mean_rows(pyramid.bottleneck()); }

} // namespace echoprompt
