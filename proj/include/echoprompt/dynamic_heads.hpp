#pragma once

#include "echoprompt/nn.hpp"

#include <array>
#include <span>
#include <vector>

namespace echoprompt {

/// Three pointwise layers in_channels -> width -> width -> 1. Parameters are
/// packed layer-major, each layer as its [in, out] row-major weight followed
/// by its [out] bias.
struct HeadShape {
    std::size_t in_channels = 8;
    std::size_t width = 8;

    struct Layer {
        std::size_t in, out, weight_offset, bias_offset;
    };

    std::array<Layer, 3> layers() const noexcept;
    std::size_t param_count() const noexcept;
};

struct HeadWeights {
    std::array<Tensor, 3> weights;  // [in, out]
    std::array<Tensor, 3> biases;   // [out]
};

HeadWeights unpack_head(std::span<const double> theta, const HeadShape& shape);
std::vector<double> pack_head(const HeadWeights& weights, const HeadShape& shape);

struct HeadParams {
    ag::Var theta;  // [param_count]
    std::size_t class_id = 0;
};

/// MLP [text || prompt || global] (3D) -> D, ReLU -> param_count.
class ParamGenerator {
public:
    ParamGenerator(std::size_t embed_dim, const HeadShape& head, CounterRng rng);

    HeadParams generate(std::span<const double> text_row, const ag::Var& prompt, const ag::Var& global,
                        std::size_t class_id) const;

    const HeadShape& head() const noexcept { return head_; }
    std::vector<NamedParam> parameters() const;

private:
    std::size_t dim_;
    HeadShape head_;
    ag::Var hidden_weight_, hidden_bias_, out_weight_, out_bias_;
};

/// Runs the dynamic head on [T, H, W, C] features -> logits [T, H, W, 1].
ag::Var apply_head(const ag::Var& features, const ag::Var& theta, const HeadShape& shape);

} // namespace echoprompt
