#include "echoprompt/autograd.hpp"

#include "echoprompt/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <utility>

namespace echoprompt::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::RowVectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;

ConstMatMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols)
{
    return {t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

MatMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols)
{
    return {t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

Node& input(Node& self, std::size_t i) { return *self.inputs[i]; }

bool wants_grad(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }

void require(bool ok, const std::string& message)
{
    if (!ok) {
        throw InvalidArgument(message);
    }
}

struct VideoDims {
    std::size_t t, h, w, c;
};

VideoDims video_dims(const Tensor& x, const char* op)
{
    require(x.rank() == 4, std::string(op) + ": expected [T,H,W,C], got " + shape_string(x.shape()));
    return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

Shape with_channels(const Shape& shape, std::size_t channels)
{
    Shape out = shape;
    if (out.empty()) {
        out.push_back(channels);
    } else {
        out.back() = channels;
    }
    return out;
}

// Gathers the zero-padded 3x3 neighbourhood of every pixel of one frame into
// a [H*W, 9*C] matrix.
void im2col3x3(const double* frame, std::size_t h, std::size_t w, std::size_t c, double* col)
{
    const std::size_t row_len = 9 * c;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double* dst = col + (y * w + x) * row_len;
            for (int dy = -1; dy <= 1; ++dy) {
                const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
                for (int dx = -1; dx <= 1; ++dx) {
                    const auto sx = static_cast<std::ptrdiff_t>(x) + dx;
                    double* tap = dst + static_cast<std::size_t>((dy + 1) * 3 + (dx + 1)) * c;
                    if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(h) ||
                        sx >= static_cast<std::ptrdiff_t>(w)) {
                        std::fill(tap, tap + c, 0.0);
                    } else {
                        const double* src =
                            frame + (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c;
                        std::copy(src, src + c, tap);
                    }
                }
            }
        }
    }
}

void col2im3x3_add(const double* col, std::size_t h, std::size_t w, std::size_t c, double* frame)
{
    const std::size_t row_len = 9 * c;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double* src = col + (y * w + x) * row_len;
            for (int dy = -1; dy <= 1; ++dy) {
                const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
                if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) {
                    continue;
                }
                for (int dx = -1; dx <= 1; ++dx) {
                    const auto sx = static_cast<std::ptrdiff_t>(x) + dx;
                    if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) {
                        continue;
                    }
                    const double* tap = src + static_cast<std::size_t>((dy + 1) * 3 + (dx + 1)) * c;
                    double* dst =
                        frame + (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c;
                    for (std::size_t k = 0; k < c; ++k) {
                        dst[k] += tap[k];
                    }
                }
            }
        }
    }
}

double log1p_exp_neg_abs(double z) { return std::log1p(std::exp(-std::abs(z))); }

double stable_sigmoid(double z)
{
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

} // namespace

Tensor& Node::grad_buffer()
{
    if (grad.empty()) {
        grad = Tensor(value.shape(), 0.0);
    }
    return grad;
}

Var Var::constant(Tensor value)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

Var Var::parameter(Tensor value)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

Tensor Var::grad() const
{
    if (!node_->has_grad()) {
        return Tensor(node_->value.shape(), 0.0);
    }
    return node_->grad;
}

void Var::zero_grad()
{
    if (node_ && node_->has_grad()) {
        node_->grad.fill(0.0);
    }
}

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
    if (any) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& v : inputs) {
            node->inputs.push_back(v.node());
        }
        node->backward_fn = std::move(backward_fn);
    }
    return Var::from_node(std::move(node));
}

void backward(const Var& root)
{
    require(root.defined() && root.value().size() == 1, "backward() needs a scalar root");
    if (!root.requires_grad()) {
        return;
    }
    // Iterative post-order DFS to obtain a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    Node& top = *root.node();
    top.grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && node->has_grad()) {
            node->backward_fn(*node);
        }
    }
}

Var add(const Var& a, const Var& b)
{
    require(a.shape() == b.shape(), "add: shape mismatch " + shape_string(a.shape()) + " vs " +
                                        shape_string(b.shape()));
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += b.value()[i];
    }
    return make_op(std::move(out), {a, b}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (wants_grad(self, k)) {
                Tensor& g = input(self, k).grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i];
                }
            }
        }
    });
}

Var sub(const Var& a, const Var& b)
{
    require(a.shape() == b.shape(), "sub: shape mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= b.value()[i];
    }
    return make_op(std::move(out), {a, b}, [](Node& self) {
        const double sign[2] = {1.0, -1.0};
        for (std::size_t k = 0; k < 2; ++k) {
            if (wants_grad(self, k)) {
                Tensor& g = input(self, k).grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += sign[k] * self.grad[i];
                }
            }
        }
    });
}

Var scale(const Var& a, double factor)
{
    Tensor out = a.value();
    for (double& v : out.storage()) {
        v *= factor;
    }
    return make_op(std::move(out), {a}, [factor](Node& self) {
        Tensor& g = input(self, 0).grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += factor * self.grad[i];
        }
    });
}

Var relu(const Var& x)
{
    Tensor out = x.value();
    for (double& v : out.storage()) {
        v = v > 0.0 ? v : 0.0;
    }
    return make_op(std::move(out), {x}, [](Node& self) {
        const Tensor& in = input(self, 0).value;
        Tensor& g = input(self, 0).grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (in[i] > 0.0) {
                g[i] += self.grad[i];
            }
        }
    });
}

Var sigmoid(const Var& x)
{
    Tensor out = x.value();
    for (double& v : out.storage()) {
        v = stable_sigmoid(v);
    }
    return make_op(std::move(out), {x}, [](Node& self) {
        Tensor& g = input(self, 0).grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = self.value[i];
            g[i] += self.grad[i] * s * (1.0 - s);
        }
    });
}

Var reshape(const Var& x, Shape shape)
{
    Tensor out = x.value().reshaped(std::move(shape));
    return make_op(std::move(out), {x}, [](Node& self) {
        Tensor& g = input(self, 0).grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i];
        }
    });
}

Var slice(const Var& x, std::size_t offset, Shape shape)
{
    const std::size_t n = shape_size(shape);
    require(offset + n <= x.value().size(), "slice: range [" + std::to_string(offset) + ", " +
                                                std::to_string(offset + n) + ") exceeds " +
                                                std::to_string(x.value().size()));
    Tensor out(std::move(shape));
    std::copy_n(x.value().data() + offset, n, out.data());
    return make_op(std::move(out), {x}, [offset](Node& self) {
        Tensor& g = input(self, 0).grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            g[offset + i] += self.grad[i];
        }
    });
}

Var concat_channels(std::span<const Var> parts)
{
    require(!parts.empty(), "concat_channels: no inputs");
    const Tensor& first = parts.front().value();
    const std::size_t rows = first.rows();
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        require(s.size() == first.rank() && std::equal(s.begin(), s.end() - (s.empty() ? 0 : 1),
                                                       first.shape().begin()),
                "concat_channels: leading axes differ (" + shape_string(first.shape()) + " vs " +
                    shape_string(s) + ")");
        widths.push_back(p.value().channels());
        total += widths.back();
    }
    Tensor out(with_channels(first.shape(), total));
    std::size_t begin = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& v = parts[k].value();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(v.data() + r * widths[k], widths[k], out.data() + r * total + begin);
        }
        begin += widths[k];
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return make_op(std::move(out), std::move(inputs), [widths, rows, total](Node& self) {
        std::size_t begin = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            if (wants_grad(self, k)) {
                Tensor& g = input(self, k).grad_buffer();
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* src = self.grad.data() + r * total + begin;
                    double* dst = g.data() + r * widths[k];
                    for (std::size_t c = 0; c < widths[k]; ++c) {
                        dst[c] += src[c];
                    }
                }
            }
            begin += widths[k];
        }
    });
}

Var take_channels(const Var& x, std::size_t begin, std::size_t count)
{
    const std::size_t width = x.value().channels();
    require(begin + count <= width, "take_channels: range exceeds channel count " + std::to_string(width));
    const std::size_t rows = x.value().rows();
    Tensor out(with_channels(x.shape(), count));
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(x.value().data() + r * width + begin, count, out.data() + r * count);
    }
    return make_op(std::move(out), {x}, [begin, count, width, rows](Node& self) {
        Tensor& g = input(self, 0).grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < count; ++c) {
                g[r * width + begin + c] += self.grad[r * count + c];
            }
        }
    });
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> weights)
{
    require(terms.size() == weights.size() && !terms.empty(), "weighted_sum: terms/weights mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        total += weights[i] * terms[i].value().item();
    }
    std::vector<double> w(weights.begin(), weights.end());
    std::vector<Var> inputs(terms.begin(), terms.end());
    return make_op(Tensor(Shape{}, {total}), std::move(inputs), [w](Node& self) {
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (wants_grad(self, i)) {
                input(self, i).grad_buffer()[0] += w[i] * self.grad[0];
            }
        }
    });
}

Var mean_of(std::span<const Var> terms)
{
    std::vector<double> w(terms.size(), terms.empty() ? 0.0 : 1.0 / static_cast<double>(terms.size()));
    return weighted_sum(terms, w);
}

Var matmul(const Var& a, const Var& w)
{
    const Tensor& av = a.value();
    const Tensor& wv = w.value();
    require(wv.rank() == 2, "matmul: weight must be rank 2, got " + shape_string(wv.shape()));
    const std::size_t k = wv.dim(0);
    const std::size_t n = wv.dim(1);
    require(av.channels() == k, "matmul: inner dims " + shape_string(av.shape()) + " x " +
                                    shape_string(wv.shape()));
    const std::size_t p = av.rows();
    Tensor out(with_channels(av.shape(), n));
    as_matrix(out, p, n).noalias() = as_matrix(av, p, k) * as_matrix(wv, k, n);
    return make_op(std::move(out), {a, w}, [p, k, n](Node& self) {
        const ConstMatMap dout = as_matrix(std::as_const(self.grad), p, n);
        if (wants_grad(self, 0)) {
            as_matrix(input(self, 0).grad_buffer(), p, k).noalias() +=
                dout * as_matrix(std::as_const(input(self, 1).value), k, n).transpose();
        }
        if (wants_grad(self, 1)) {
            as_matrix(input(self, 1).grad_buffer(), k, n).noalias() +=
                as_matrix(std::as_const(input(self, 0).value), p, k).transpose() * dout;
        }
    });
}

Var add_bias(const Var& a, const Var& bias)
{
    const std::size_t n = a.value().channels();
    require(bias.value().size() == n, "add_bias: bias length " + std::to_string(bias.value().size()) +
                                          " vs channels " + std::to_string(n));
    const std::size_t rows = a.value().rows();
    Tensor out = a.value();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            out[r * n + c] += bias.value()[c];
        }
    }
    return make_op(std::move(out), {a, bias}, [rows, n](Node& self) {
        if (wants_grad(self, 0)) {
            Tensor& g = input(self, 0).grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i];
            }
        }
        if (wants_grad(self, 1)) {
            Tensor& g = input(self, 1).grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < n; ++c) {
                    g[c] += self.grad[r * n + c];
                }
            }
        }
    });
}

Var mean_rows(const Var& x)
{
    const std::size_t c = x.value().channels();
    const std::size_t rows = x.value().rows();
    require(rows > 0, "mean_rows: empty input");
    Tensor out(Shape{c}, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t k = 0; k < c; ++k) {
            out[k] += x.value()[r * c + k];
        }
    }
    const double inv = 1.0 / static_cast<double>(rows);
    for (double& v : out.storage()) {
        v *= inv;
    }
    return make_op(std::move(out), {x}, [rows, c, inv](Node& self) {
        Tensor& g = input(self, 0).grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t k = 0; k < c; ++k) {
                g[r * c + k] += self.grad[k] * inv;
            }
        }
    });
}

Var mean_selected_rows(const Var& table, std::span<const std::size_t> rows)
{
    require(!rows.empty(), "mean_selected_rows: empty selection");
    const std::size_t c = table.value().channels();
    const std::size_t total_rows = table.value().rows();
    Tensor out(Shape{c}, 0.0);
    for (std::size_t r : rows) {
        require(r < total_rows, "mean_selected_rows: row index out of range");
        for (std::size_t k = 0; k < c; ++k) {
            out[k] += table.value()[r * c + k];
        }
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (double& v : out.storage()) {
        v *= inv;
    }
    std::vector<std::size_t> picked(rows.begin(), rows.end());
    return make_op(std::move(out), {table}, [picked, c, inv](Node& self) {
        Tensor& g = input(self, 0).grad_buffer();
        for (std::size_t r : picked) {
            for (std::size_t k = 0; k < c; ++k) {
                g[r * c + k] += self.grad[k] * inv;
            }
        }
    });
}

Var l2_normalize(const Var& x)
{
    double sq = 0.0;
    for (double v : x.value().values()) {
        sq += v * v;
    }
    const double norm = std::sqrt(sq);
    Tensor out(x.shape(), 0.0);
    if (norm < 1e-12) {
        return make_op(std::move(out), {x}, [](Node&) {});
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x.value()[i] / norm;
    }
    return make_op(std::move(out), {x}, [norm](Node& self) {
        const Tensor& y = self.value;
        double dot = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            dot += y[i] * self.grad[i];
        }
        Tensor& g = input(self, 0).grad_buffer();
        for (std::size_t i = 0; i < y.size(); ++i) {
            g[i] += (self.grad[i] - y[i] * dot) / norm;
        }
    });
}

Var cosine(const Var& a, const Var& b)
{
    require(a.value().size() == b.value().size(), "cosine: length mismatch");
    const std::size_t n = a.value().size();
    const ConstVecMap av(a.value().data(), static_cast<Eigen::Index>(n));
    const ConstVecMap bv(b.value().data(), static_cast<Eigen::Index>(n));
    const double na = av.norm();
    const double nb = bv.norm();
    const bool degenerate = na < 1e-12 || nb < 1e-12;
    const double value = degenerate ? 0.0 : av.dot(bv) / (na * nb);
    return make_op(Tensor(Shape{}, {value}), {a, b}, [n, na, nb, value, degenerate](Node& self) {
        if (degenerate) {
            return;
        }
        const double g = self.grad[0];
        const Tensor& at = input(self, 0).value;
        const Tensor& bt = input(self, 1).value;
        if (wants_grad(self, 0)) {
            Tensor& ga = input(self, 0).grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                ga[i] += g * (bt[i] / (na * nb) - value * at[i] / (na * na));
            }
        }
        if (wants_grad(self, 1)) {
            Tensor& gb = input(self, 1).grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                gb[i] += g * (at[i] / (na * nb) - value * bt[i] / (nb * nb));
            }
        }
    });
}

Var cosine_scores(const Var& x, const Tensor& unit_rows)
{
    require(unit_rows.rank() == 2, "cosine_scores: text matrix must be rank 2");
    const std::size_t d = unit_rows.dim(1);
    const std::size_t k = unit_rows.dim(0);
    require(x.value().channels() == d, "cosine_scores: feature dim " + std::to_string(x.value().channels()) +
                                           " != text dim " + std::to_string(d));
    const std::size_t p = x.value().rows();
    // Normalised copy of the features, zero rows for degenerate norms.
    Tensor unit(Shape{p, d});
    std::vector<double> norms(p);
    for (std::size_t r = 0; r < p; ++r) {
        const double* src = x.value().data() + r * d;
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            s += src[c] * src[c];
        }
        norms[r] = std::sqrt(s);
        const double inv = norms[r] < 1e-12 ? 0.0 : 1.0 / norms[r];
        for (std::size_t c = 0; c < d; ++c) {
            unit[r * d + c] = src[c] * inv;
        }
    }
    Tensor out(with_channels(x.shape(), k));
    as_matrix(out, p, k).noalias() = as_matrix(std::as_const(unit), p, d) * as_matrix(unit_rows, k, d).transpose();
    Tensor text = unit_rows;
    return make_op(std::move(out), {x},
                   [p, d, k, unit = std::move(unit), norms = std::move(norms), text = std::move(text)](Node& self) {
                       Tensor& g = input(self, 0).grad_buffer();
                       // d/dx (x/|x|)·f = (f - (u·f) u) / |x|
                       RowMat proj = as_matrix(std::as_const(self.grad), p, k) * as_matrix(text, k, d);
                       for (std::size_t r = 0; r < p; ++r) {
                           if (norms[r] < 1e-12) {
                               continue;
                           }
                           double along = 0.0;
                           for (std::size_t c = 0; c < k; ++c) {
                               along += self.grad[r * k + c] * self.value[r * k + c];
                           }
                           const double inv = 1.0 / norms[r];
                           for (std::size_t c = 0; c < d; ++c) {
                               g[r * d + c] += inv * (proj(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) -
                                                      along * unit[r * d + c]);
                           }
                       }
                   });
}

Var conv_spatial3x3(const Var& x, const Var& weight, const Var& bias)
{
    const VideoDims v = video_dims(x.value(), "conv_spatial3x3");
    require(weight.value().rank() == 2 && weight.value().dim(0) == 9 * v.c,
            "conv_spatial3x3: weight " + shape_string(weight.shape()) + " incompatible with " +
                std::to_string(v.c) + " input channels");
    const std::size_t cout = weight.value().dim(1);
    require(bias.value().size() == cout, "conv_spatial3x3: bias length mismatch");
    const std::size_t hw = v.h * v.w;
    Tensor out(Shape{v.t, v.h, v.w, cout});
    Tensor col(Shape{hw, 9 * v.c});
    const ConstMatMap wm = as_matrix(weight.value(), 9 * v.c, cout);
    const ConstVecMap bm(bias.value().data(), static_cast<Eigen::Index>(cout));
    for (std::size_t t = 0; t < v.t; ++t) {
        im2col3x3(x.value().data() + t * hw * v.c, v.h, v.w, v.c, col.data());
        MatMap om(out.data() + t * hw * cout, static_cast<Eigen::Index>(hw), static_cast<Eigen::Index>(cout));
        om.noalias() = as_matrix(std::as_const(col), hw, 9 * v.c) * wm;
        om.rowwise() += bm;
    }
    return make_op(std::move(out), {x, weight, bias}, [v, cout, hw](Node& self) {
        const Tensor& xin = input(self, 0).value;
        const Tensor& wt = input(self, 1).value;
        Tensor col(Shape{hw, 9 * v.c});
        Tensor dcol(Shape{hw, 9 * v.c});
        for (std::size_t t = 0; t < v.t; ++t) {
            const ConstMatMap dout(self.grad.data() + t * hw * cout, static_cast<Eigen::Index>(hw),
                                   static_cast<Eigen::Index>(cout));
            if (wants_grad(self, 1)) {
                im2col3x3(xin.data() + t * hw * v.c, v.h, v.w, v.c, col.data());
                as_matrix(input(self, 1).grad_buffer(), 9 * v.c, cout).noalias() +=
                    as_matrix(std::as_const(col), hw, 9 * v.c).transpose() * dout;
            }
            if (wants_grad(self, 2)) {
                VecMap(input(self, 2).grad_buffer().data(), static_cast<Eigen::Index>(cout)) += dout.colwise().sum();
            }
            if (wants_grad(self, 0)) {
                as_matrix(dcol, hw, 9 * v.c).noalias() = dout * as_matrix(wt, 9 * v.c, cout).transpose();
                col2im3x3_add(dcol.data(), v.h, v.w, v.c, input(self, 0).grad_buffer().data() + t * hw * v.c);
            }
        }
    });
}

Var conv_temporal3(const Var& x, const Var& weight, const Var& bias)
{
    const VideoDims v = video_dims(x.value(), "conv_temporal3");
    require(weight.value().rank() == 2 && weight.value().dim(0) == 3 * v.c,
            "conv_temporal3: weight " + shape_string(weight.shape()) + " incompatible with " +
                std::to_string(v.c) + " input channels");
    const std::size_t cout = weight.value().dim(1);
    require(bias.value().size() == cout, "conv_temporal3: bias length mismatch");
    const std::size_t hw = v.h * v.w;
    const auto rows = static_cast<Eigen::Index>(hw);
    const auto cin = static_cast<Eigen::Index>(v.c);
    const auto co = static_cast<Eigen::Index>(cout);
    Tensor out(Shape{v.t, v.h, v.w, cout});
    const ConstVecMap bm(bias.value().data(), co);
    for (std::size_t t = 0; t < v.t; ++t) {
        MatMap om(out.data() + t * hw * cout, rows, co);
        om.rowwise() = bm;
        for (std::size_t k = 0; k < 3; ++k) {
            const auto src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k) - 1;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(v.t)) {
                continue;
            }
            const ConstMatMap xm(x.value().data() + static_cast<std::size_t>(src) * hw * v.c, rows, cin);
            const ConstMatMap wk(weight.value().data() + k * v.c * cout, cin, co);
            om.noalias() += xm * wk;
        }
    }
    return make_op(std::move(out), {x, weight, bias}, [v, hw, rows, cin, co](Node& self) {
        const Tensor& xin = input(self, 0).value;
        const Tensor& wt = input(self, 1).value;
        const auto cout = static_cast<std::size_t>(co);
        for (std::size_t t = 0; t < v.t; ++t) {
            const ConstMatMap dout(self.grad.data() + t * hw * cout, rows, co);
            if (wants_grad(self, 2)) {
                VecMap(input(self, 2).grad_buffer().data(), co) += dout.colwise().sum();
            }
            for (std::size_t k = 0; k < 3; ++k) {
                const auto src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k) - 1;
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(v.t)) {
                    continue;
                }
                const std::size_t s = static_cast<std::size_t>(src);
                if (wants_grad(self, 1)) {
                    MatMap gw(input(self, 1).grad_buffer().data() + k * v.c * cout, cin, co);
                    gw.noalias() += ConstMatMap(xin.data() + s * hw * v.c, rows, cin).transpose() * dout;
                }
                if (wants_grad(self, 0)) {
                    MatMap gx(input(self, 0).grad_buffer().data() + s * hw * v.c, rows, cin);
                    gx.noalias() += dout * ConstMatMap(wt.data() + k * v.c * cout, cin, co).transpose();
                }
            }
        }
    });
}

Var avg_pool2(const Var& x)
{
    const VideoDims v = video_dims(x.value(), "avg_pool2");
    require(v.h % 2 == 0 && v.w % 2 == 0, "avg_pool2: spatial dims must be even, got " + shape_string(x.shape()));
    const std::size_t oh = v.h / 2;
    const std::size_t ow = v.w / 2;
    Tensor out(Shape{v.t, oh, ow, v.c}, 0.0);
    const Tensor& in = x.value();
    for (std::size_t t = 0; t < v.t; ++t) {
        for (std::size_t y = 0; y < v.h; ++y) {
            for (std::size_t xx = 0; xx < v.w; ++xx) {
                const double* src = in.data() + ((t * v.h + y) * v.w + xx) * v.c;
                double* dst = out.data() + ((t * oh + y / 2) * ow + xx / 2) * v.c;
                for (std::size_t c = 0; c < v.c; ++c) {
                    dst[c] += 0.25 * src[c];
                }
            }
        }
    }
    return make_op(std::move(out), {x}, [v, oh, ow](Node& self) {
        Tensor& g = input(self, 0).grad_buffer();
        for (std::size_t t = 0; t < v.t; ++t) {
            for (std::size_t y = 0; y < v.h; ++y) {
                for (std::size_t xx = 0; xx < v.w; ++xx) {
                    double* dst = g.data() + ((t * v.h + y) * v.w + xx) * v.c;
                    const double* src = self.grad.data() + ((t * oh + y / 2) * ow + xx / 2) * v.c;
                    for (std::size_t c = 0; c < v.c; ++c) {
                        dst[c] += 0.25 * src[c];
                    }
                }
            }
        }
    });
}

Var upsample2(const Var& x)
{
    const VideoDims v = video_dims(x.value(), "upsample2");
    const std::size_t oh = v.h * 2;
    const std::size_t ow = v.w * 2;
    Tensor out(Shape{v.t, oh, ow, v.c});
    const Tensor& in = x.value();
    for (std::size_t t = 0; t < v.t; ++t) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t xx = 0; xx < ow; ++xx) {
                const double* src = in.data() + ((t * v.h + y / 2) * v.w + xx / 2) * v.c;
                std::copy_n(src, v.c, out.data() + ((t * oh + y) * ow + xx) * v.c);
            }
        }
    }
    return make_op(std::move(out), {x}, [v, oh, ow](Node& self) {
        Tensor& g = input(self, 0).grad_buffer();
        for (std::size_t t = 0; t < v.t; ++t) {
            for (std::size_t y = 0; y < oh; ++y) {
                for (std::size_t xx = 0; xx < ow; ++xx) {
                    const double* src = self.grad.data() + ((t * oh + y) * ow + xx) * v.c;
                    double* dst = g.data() + ((t * v.h + y / 2) * v.w + xx / 2) * v.c;
                    for (std::size_t c = 0; c < v.c; ++c) {
                        dst[c] += src[c];
                    }
                }
            }
        }
    });
}

Var masked_bce_with_logits(const Var& logits, std::span<const std::uint8_t> targets,
                           std::span<const std::uint8_t> frame_valid, double clamp)
{
    const Tensor& z = logits.value();
    require(z.rank() == 4, "masked_bce_with_logits: logits must be [T,H,W,N]");
    require(targets.size() == z.size(), "masked_bce_with_logits: target size mismatch");
    require(frame_valid.size() == z.dim(0), "masked_bce_with_logits: frame flag count mismatch");
    const std::size_t per_frame = z.size() / z.dim(0);
    std::size_t count = 0;
    long double total = 0.0L;
    for (std::size_t t = 0; t < z.dim(0); ++t) {
        if (!frame_valid[t]) {
            continue;
        }
        count += per_frame;
        for (std::size_t i = t * per_frame; i < (t + 1) * per_frame; ++i) {
            const double zc = std::clamp(z[i], -clamp, clamp);
            const double y = targets[i] ? 1.0 : 0.0;
            total += std::max(zc, 0.0) - y * zc + log1p_exp_neg_abs(zc);
        }
    }
    if (count == 0) {
        return Var::constant(Tensor(Shape{}, {0.0}));
    }
    const double value = static_cast<double>(total / static_cast<long double>(count));
    std::vector<std::uint8_t> tgt(targets.begin(), targets.end());
    std::vector<std::uint8_t> valid(frame_valid.begin(), frame_valid.end());
    return make_op(Tensor(Shape{}, {value}), {logits},
                   [tgt = std::move(tgt), valid = std::move(valid), per_frame, count, clamp](Node& self) {
                       const Tensor& z = input(self, 0).value;
                       Tensor& g = input(self, 0).grad_buffer();
                       const double scale = self.grad[0] / static_cast<double>(count);
                       for (std::size_t t = 0; t < valid.size(); ++t) {
                           if (!valid[t]) {
                               continue;
                           }
                           for (std::size_t i = t * per_frame; i < (t + 1) * per_frame; ++i) {
                               if (z[i] > -clamp && z[i] < clamp) {
                                   g[i] += scale * (stable_sigmoid(z[i]) - (tgt[i] ? 1.0 : 0.0));
                               }
                           }
                       }
                   });
}

Var softmax_cross_entropy(const Var& scores, std::span<const int> labels, double temperature)
{
    require(temperature > 0.0, "softmax_cross_entropy: temperature must be positive");
    const Tensor& s = scores.value();
    const std::size_t classes = s.channels();
    const std::size_t positions = s.rows();
    require(labels.size() == positions, "softmax_cross_entropy: label count mismatch");
    Tensor probs(Shape{positions, classes}, 0.0);
    std::size_t count = 0;
    long double total = 0.0L;
    for (std::size_t p = 0; p < positions; ++p) {
        const int label = labels[p];
        if (label < 0) {
            continue;
        }
        require(static_cast<std::size_t>(label) < classes, "softmax_cross_entropy: label out of range");
        ++count;
        const double* row = s.data() + p * classes;
        double peak = row[0] / temperature;
        for (std::size_t c = 1; c < classes; ++c) {
            peak = std::max(peak, row[c] / temperature);
        }
        double denom = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            const double e = std::exp(row[c] / temperature - peak);
            probs[p * classes + c] = e;
            denom += e;
        }
        for (std::size_t c = 0; c < classes; ++c) {
            probs[p * classes + c] /= denom;
        }
        total += peak + std::log(denom) - row[static_cast<std::size_t>(label)] / temperature;
    }
    if (count == 0) {
        return Var::constant(Tensor(Shape{}, {0.0}));
    }
    const double value = static_cast<double>(total / static_cast<long double>(count));
    std::vector<int> lab(labels.begin(), labels.end());
    return make_op(Tensor(Shape{}, {value}), {scores},
                   [probs = std::move(probs), lab = std::move(lab), classes, count, temperature](Node& self) {
                       Tensor& g = input(self, 0).grad_buffer();
                       const double scale = self.grad[0] / (static_cast<double>(count) * temperature);
                       for (std::size_t p = 0; p < lab.size(); ++p) {
                           if (lab[p] < 0) {
                               continue;
                           }
                           for (std::size_t c = 0; c < classes; ++c) {
                               const double target = static_cast<int>(c) == lab[p] ? 1.0 : 0.0;
                               g[p * classes + c] += scale * (probs[p * classes + c] - target);
                           }
                       }
                   });
}

Var sigmoid_cross_entropy(const Var& scores, std::span<const std::uint8_t> targets,
                          std::span<const std::uint8_t> position_valid, double temperature,
                          std::size_t foreground)
{
    require(temperature > 0.0, "sigmoid_cross_entropy: temperature must be positive");
    const Tensor& s = scores.value();
    const std::size_t classes = s.channels();
    const std::size_t positions = s.rows();
    require(foreground <= classes, "sigmoid_cross_entropy: foreground exceeds channels");
    require(targets.size() == positions * foreground, "sigmoid_cross_entropy: target size mismatch");
    require(position_valid.size() == positions, "sigmoid_cross_entropy: flag count mismatch");
    std::size_t count = 0;
    long double total = 0.0L;
    for (std::size_t p = 0; p < positions; ++p) {
        if (!position_valid[p]) {
            continue;
        }
        for (std::size_t c = 0; c < foreground; ++c) {
            const double z = s[p * classes + c] / temperature;
            const double y = targets[p * foreground + c] ? 1.0 : 0.0;
            total += std::max(z, 0.0) - y * z + log1p_exp_neg_abs(z);
            ++count;
        }
    }
    if (count == 0) {
        return Var::constant(Tensor(Shape{}, {0.0}));
    }
    const double value = static_cast<double>(total / static_cast<long double>(count));
    std::vector<std::uint8_t> tgt(targets.begin(), targets.end());
    std::vector<std::uint8_t> valid(position_valid.begin(), position_valid.end());
    return make_op(Tensor(Shape{}, {value}), {scores},
                   [tgt = std::move(tgt), valid = std::move(valid), classes, foreground, count,
                    temperature](Node& self) {
                       const Tensor& s = input(self, 0).value;
                       Tensor& g = input(self, 0).grad_buffer();
                       const double scale = self.grad[0] / (static_cast<double>(count) * temperature);
                       for (std::size_t p = 0; p < valid.size(); ++p) {
                           if (!valid[p]) {
                               continue;
                           }
                           for (std::size_t c = 0; c < foreground; ++c) {
                               const double z = s[p * classes + c] / temperature;
                               g[p * classes + c] += scale * (stable_sigmoid(z) - (tgt[p * foreground + c] ? 1.0 : 0.0));
                           }
                       }
                   });
}

} // namespace echoprompt::ag
