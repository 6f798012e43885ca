#include "echoprompt/pixel_text_alignment.hpp"

#include "echoprompt/error.hpp"

#include <array>

namespace echoprompt {

std::string_view to_string(PixelTextLossKind k) noexcept { return k == PixelTextLossKind::softmax ? "softmax" : "sigmoid"; }

PixelTextLossKind parse_pixel_text_loss(std::string_view name)
{
    if (name == "softmax") return PixelTextLossKind::softmax;
    if (name == "sigmoid") return PixelTextLossKind::sigmoid;
    throw InvalidArgument("unknown pixel-text loss '" + std::string(name) + "'");
}

ag::Var score_map(const ag::Var& bottleneck, const TextEmbeddingMatrix& text)
{
    if (!text.normalized) {
        throw InvalidArgument("score_map: text embeddings must be normalised");
    }
    if (bottleneck.value().channels() != text.dim()) {
        throw InvalidArgument("score_map: vision dim " + std::to_string(bottleneck.value().channels()) +
                              " != text dim " + std::to_string(text.dim()));
    }
    return ag::cosine_scores(bottleneck, text.rows);
}

LowResLabels downsample_labels(const VideoSample& sample, std::size_t height, std::size_t width)
{
    if (height == 0 || width == 0 || sample.height % height != 0 || sample.width % width != 0) {
        throw InvalidArgument("downsample_labels: grid " + std::to_string(height) + "x" + std::to_string(width) +
                              " does not divide " + std::to_string(sample.height) + "x" +
                              std::to_string(sample.width));
    }
    const std::size_t fy = sample.height / height;
    const std::size_t fx = sample.width / width;
    LowResLabels out;
    out.frames = sample.frames;
    out.height = height;
    out.width = width;
    out.foreground = sample.classes;
    const std::size_t positions = std::size_t{sample.frames} * height * width;
    out.single.assign(positions, -1);
    out.multi.assign(positions * sample.classes, 0);
    out.valid.assign(positions, 0);
    for (std::size_t t = 0; t < sample.frames; ++t) {
        if (!sample.is_labeled(t)) {
            continue;
        }
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                // Sample the centre pixel of each cell.
                const std::size_t sy = y * fy + fy / 2;
                const std::size_t sx = x * fx + fx / 2;
                const std::size_t p = (t * height + y) * width + x;
                out.valid[p] = 1;
                int label = static_cast<int>(sample.classes);
                for (std::size_t c = sample.classes; c-- > 0;) {
                    const std::uint8_t m = sample.mask(t, sy, sx, c);
                    out.multi[p * sample.classes + c] = m;
                    if (m) {
                        label = static_cast<int>(c);
                    }
                }
                out.single[p] = label;
            }
        }
    }
    return out;
}

ag::Var pixel_text_loss(const ag::Var& scores, const LowResLabels& labels, const PixelTextConfig& config)
{
    const Shape& s = scores.shape();
    if (s.size() != 4 || s[0] != labels.frames || s[1] != labels.height || s[2] != labels.width ||
        s[3] != labels.foreground + 1) {
        throw InvalidArgument("pixel_text_loss: scores " + shape_string(s) + " do not match label grid");
    }
    if (config.kind == PixelTextLossKind::softmax) {
        return ag::softmax_cross_entropy(scores, labels.single, config.temperature);
    }
    return ag::sigmoid_cross_entropy(scores, labels.multi, labels.valid, config.temperature, labels.foreground);
}

ag::Var fuse(const ag::Var& scores, const ag::Var& bottleneck, std::size_t foreground)
{
    const Shape& s = scores.shape();
    const Shape& b = bottleneck.shape();
    if (s.size() != 4 || b.size() != 4 || s[0] != b[0] || s[1] != b[1] || s[2] != b[2]) {
        throw InvalidArgument("fuse: score map " + shape_string(s) + " and bottleneck " + shape_string(b) +
                              " disagree on [T,H,W]");
    }
    if (foreground > s[3]) {
        throw InvalidArgument("fuse: score map has fewer than " + std::to_string(foreground) + " channels");
    }
    const std::array<ag::Var, 2> parts{bottleneck, ag::take_channels(scores, 0, foreground)};
    return ag::concat_channels(parts);
}

} // namespace echoprompt
