#pragma once

#include "echoprompt/tensor.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

// Minimal reverse-mode differentiation over dense tensors. Every operation
// records its inputs and a backward closure; backward() walks the graph in
// reverse topological order. Leaves created with Var::parameter accumulate
// gradients across calls until zero_grad().
namespace echoprompt::ag {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    /// Allocates a zero gradient of the value's shape on first use.
    Tensor& grad_buffer();
    bool has_grad() const noexcept { return !grad.empty(); }
};

class Var {
public:
    Var() = default;

    static Var constant(Tensor value);
    static Var parameter(Tensor value);

    bool defined() const noexcept { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    /// Writable access for optimizers and finite-difference probes.
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

    /// Gradient accumulated by the last backward(); zeros when never reached.
    Tensor grad() const;
    void zero_grad();

    const std::shared_ptr<Node>& node() const noexcept { return node_; }

    static Var from_node(std::shared_ptr<Node> node) { return Var(std::move(node)); }

private:
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    std::shared_ptr<Node> node_;
};

/// Back-propagates from a scalar root (seed gradient 1).
void backward(const Var& root);

/// Builds an op node; the closure is dropped when no input requires a gradient.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

// Elementwise and shape ops.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var reshape(const Var& x, Shape shape);
/// Contiguous flat slice [offset, offset + size(shape)) reshaped to `shape`.
Var slice(const Var& x, std::size_t offset, Shape shape);
/// Concatenates along the trailing axis; all leading axes must agree.
Var concat_channels(std::span<const Var> parts);
/// Channels [begin, begin + count) of the trailing axis.
Var take_channels(const Var& x, std::size_t begin, std::size_t count);

/// Weighted sum of scalars: sum_i weight_i * term_i.
Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);
Var mean_of(std::span<const Var> terms);

// Linear algebra. Inputs are viewed as [rows, channels].
/// [P, K] x [K, N] -> [P, N]; leading axes of `a` are preserved.
Var matmul(const Var& a, const Var& w);
/// Adds a [N] bias to every row of [..., N].
Var add_bias(const Var& a, const Var& bias);
/// Mean over all rows of [..., C] -> [C].
Var mean_rows(const Var& x);
/// Mean of the selected rows of a [R, C] table -> [C].
Var mean_selected_rows(const Var& table, std::span<const std::size_t> rows);
/// x / |x| over all entries; zero when |x| < 1e-12.
Var l2_normalize(const Var& x);
/// Cosine similarity of two equally sized vectors -> scalar.
Var cosine(const Var& a, const Var& b);
/// Per-row cosine between rows of [..., D] and a frozen [K, D] matrix with
/// unit-norm rows -> [..., K]. Rows with norm below 1e-12 score zero.
Var cosine_scores(const Var& x, const Tensor& unit_rows);

// Video ops on channels-last [T, H, W, C].
/// Per-frame 3x3 convolution, zero padded. Weights [9 * Cin, Cout] ordered
/// (dy, dx, cin) row-major, bias [Cout].
Var conv_spatial3x3(const Var& x, const Var& weight, const Var& bias);
/// 3-tap convolution across frames, zero padded. Weights [3 * Cin, Cout]
/// ordered (dt, cin), bias [Cout].
Var conv_temporal3(const Var& x, const Var& weight, const Var& bias);
/// 2x2 spatial average pooling; T is preserved.
Var avg_pool2(const Var& x);
/// 2x nearest-neighbour spatial upsampling.
Var upsample2(const Var& x);

// Losses, all returning scalars.
/// Binary cross-entropy with logits clamped to +-clamp. Elements whose frame
/// is not flagged in `frame_valid` contribute nothing to value or gradient.
/// `targets` matches the logits layout [T, H, W, N].
Var masked_bce_with_logits(const Var& logits, std::span<const std::uint8_t> targets,
                           std::span<const std::uint8_t> frame_valid, double clamp);
/// Softmax cross-entropy on scores / temperature, scores viewed as
/// [positions, classes]. Label -1 excludes a position. Mean over included.
Var softmax_cross_entropy(const Var& scores, std::span<const int> labels, double temperature);
/// Per-channel sigmoid BCE on scores / temperature over the first
/// `foreground` channels. `targets` is [positions, foreground]; positions
/// not flagged in `position_valid` are excluded.
Var sigmoid_cross_entropy(const Var& scores, std::span<const std::uint8_t> targets,
                          std::span<const std::uint8_t> position_valid, double temperature,
                          std::size_t foreground);

} // namespace echoprompt::ag
