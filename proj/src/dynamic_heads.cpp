#include "echoprompt/dynamic_heads.hpp"

#include "echoprompt/error.hpp"

#include <cmath>

namespace echoprompt {

std::array<HeadShape::Layer, 3> HeadShape::layers() const noexcept
{
    const std::size_t ins[3] = {in_channels, width, width};
    const std::size_t outs[3] = {width, width, 1};
    std::array<Layer, 3> out{};
    std::size_t offset = 0;
    for (std::size_t l = 0; l < 3; ++l) {
        out[l].in = ins[l];
        out[l].out = outs[l];
        out[l].weight_offset = offset;
        offset += ins[l] * outs[l];
        out[l].bias_offset = offset;
        offset += outs[l];
    }
    return out;
}

std::size_t HeadShape::param_count() const noexcept
{
    const auto l = layers();
    return l[2].bias_offset + l[2].out;
}

HeadWeights unpack_head(std::span<const double> theta, const HeadShape& shape)
{
    if (theta.size() != shape.param_count()) {
        throw InvalidArgument("unpack_head: theta has " + std::to_string(theta.size()) + " entries, expected " +
                              std::to_string(shape.param_count()));
    }
    HeadWeights w;
    const auto layers = shape.layers();
    for (std::size_t l = 0; l < 3; ++l) {
        const auto& L = layers[l];
        const auto wb = theta.begin() + static_cast<std::ptrdiff_t>(L.weight_offset);
        const auto bb = theta.begin() + static_cast<std::ptrdiff_t>(L.bias_offset);
        w.weights[l] = Tensor({L.in, L.out}, std::vector<double>(wb, wb + static_cast<std::ptrdiff_t>(L.in * L.out)));
        w.biases[l] = Tensor({L.out}, std::vector<double>(bb, bb + static_cast<std::ptrdiff_t>(L.out)));
    }
    return w;
}

std::vector<double> pack_head(const HeadWeights& weights, const HeadShape& shape)
{
    std::vector<double> theta(shape.param_count());
    const auto layers = shape.layers();
    for (std::size_t l = 0; l < 3; ++l) {
        const auto& L = layers[l];
        if (weights.weights[l].size() != L.in * L.out || weights.biases[l].size() != L.out) {
            throw InvalidArgument("pack_head: layer " + std::to_string(l) + " has the wrong size");
        }
        std::copy(weights.weights[l].storage().begin(), weights.weights[l].storage().end(),
                  theta.begin() + static_cast<std::ptrdiff_t>(L.weight_offset));
        std::copy(weights.biases[l].storage().begin(), weights.biases[l].storage().end(),
                  theta.begin() + static_cast<std::ptrdiff_t>(L.bias_offset));
    }
    return theta;
}

ParamGenerator::ParamGenerator(std::size_t embed_dim, const HeadShape& head, CounterRng rng)
    : dim_(embed_dim), head_(head)
{
    if (embed_dim == 0 || head.in_channels == 0 || head.width == 0) {
        throw InvalidArgument("param generator: sizes must be positive");
    }
    const std::size_t count = head.param_count();
    CounterRng h = rng.split("hidden");
    CounterRng o = rng.split("output");
    CounterRng t = rng.split("template");
    hidden_weight_ = he_weight({3 * dim_, dim_}, 3 * dim_, h);
    hidden_bias_ = zero_param({dim_});
    out_weight_ = ag::Var::parameter(gaussian_tensor({dim_, count}, 0.1 / std::sqrt(static_cast<double>(dim_)), o));
    // The output bias starts as a He-initialised head so freshly generated
    // heads are well scaled; the input-dependent part starts small.
    HeadWeights templ;
    const auto layers = head.layers();
    for (std::size_t l = 0; l < 3; ++l) {
        templ.weights[l] = gaussian_tensor({layers[l].in, layers[l].out},
                                           std::sqrt(2.0 / static_cast<double>(layers[l].in)), t);
        templ.biases[l] = Tensor({layers[l].out}, 0.0);
    }
    out_bias_ = ag::Var::parameter(Tensor({count}, pack_head(templ, head)));
}

HeadParams ParamGenerator::generate(std::span<const double> text_row, const ag::Var& prompt, const ag::Var& global,
                                    std::size_t class_id) const
{
    if (text_row.size() != dim_ || prompt.value().size() != dim_ || global.value().size() != dim_) {
        throw InvalidArgument("param generator: expected three " + std::to_string(dim_) + "-vectors, got " +
                              std::to_string(text_row.size()) + ", " + std::to_string(prompt.value().size()) + ", " +
                              std::to_string(global.value().size()));
    }
    const ag::Var text = ag::Var::constant(Tensor({dim_}, std::vector<double>(text_row.begin(), text_row.end())));
    const std::array<ag::Var, 3> parts{text, ag::reshape(prompt, {dim_}), ag::l2_normalize(ag::reshape(global, {dim_}))};
    const ag::Var input = ag::reshape(ag::concat_channels(parts), {1, 3 * dim_});
    const ag::Var hidden = ag::relu(ag::add_bias(ag::matmul(input, hidden_weight_), hidden_bias_));
    const ag::Var out = ag::add_bias(ag::matmul(hidden, out_weight_), out_bias_);
    return {ag::reshape(out, {head_.param_count()}), class_id};
}

std::vector<NamedParam> ParamGenerator::parameters() const
{
    return {{"generator.hidden.weight", hidden_weight_},
            {"generator.hidden.bias", hidden_bias_},
            {"generator.output.weight", out_weight_},
            {"generator.output.bias", out_bias_}};
}

ag::Var apply_head(const ag::Var& features, const ag::Var& theta, const HeadShape& shape)
{
    if (theta.value().size() != shape.param_count()) {
        throw InvalidArgument("apply_head: theta has " + std::to_string(theta.value().size()) +
                              " entries, expected " + std::to_string(shape.param_count()));
    }
    if (features.value().channels() != shape.in_channels) {
        throw InvalidArgument("apply_head: features have " + std::to_string(features.value().channels()) +
                              " channels, head expects " + std::to_string(shape.in_channels));
    }
    ag::Var x = features;
    const auto layers = shape.layers();
    for (std::size_t l = 0; l < 3; ++l) {
        const auto& L = layers[l];
        const ag::Var w = ag::slice(theta, L.weight_offset, {L.in, L.out});
        const ag::Var b = ag::slice(theta, L.bias_offset, {L.out});
        x = ag::add_bias(ag::matmul(x, w), b);
        if (l < 2) {
            x = ag::relu(x);
        }
    }
    return x;
}

} // namespace echoprompt
