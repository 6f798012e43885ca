#include "echoprompt/prompt_pool.hpp"

#include "echoprompt/error.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

namespace echoprompt {

namespace {

std::vector<double> normalized(std::vector<double> v)
{
    double norm = 0.0;
    for (double x : v) {
        norm += x * x;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
        throw InvalidArgument("query vector has zero norm");
    }
    for (double& x : v) {
        x /= norm;
    }
    return v;
}

} // namespace

PromptPool::PromptPool(const PromptPoolConfig& config, CounterRng rng) : config_(config)
{
    if (config.num_views == 0 || config.prompts_per_view == 0 || config.prompt_length == 0 || config.embed_dim == 0) {
        throw InvalidArgument("prompt pool: all sizes must be positive");
    }
    CounterRng key_rng = rng.split("keys");
    CounterRng value_rng = rng.split("values");
    keys_ = ag::Var::parameter(gaussian_tensor({size(), config.embed_dim}, config.init_std, key_rng));
    values_ = ag::Var::parameter(
        gaussian_tensor({size(), config.prompt_length, config.embed_dim}, config.init_std, value_rng));
}

std::uint32_t PromptPool::group_of_key(std::size_t key) const
{
    if (key >= size()) {
        throw InvalidArgument("prompt pool: key index " + std::to_string(key) + " out of range");
    }
    return static_cast<std::uint32_t>(key / config_.prompts_per_view);
}

std::vector<std::size_t> PromptPool::keys_of_view(std::uint32_t view) const
{
    if (view >= config_.num_views) {
        throw InvalidArgument("prompt pool: view " + std::to_string(view) + " out of range");
    }
    std::vector<std::size_t> out(config_.prompts_per_view);
    std::iota(out.begin(), out.end(), std::size_t{view} * config_.prompts_per_view);
    return out;
}

PatchQueryEncoder::PatchQueryEncoder(std::size_t patch_size, std::size_t embed_dim, std::uint64_t seed,
                                     std::size_t channels)
    : patch_(patch_size), channels_(channels), dim_(embed_dim)
{
    if (patch_size == 0 || embed_dim == 0 || channels == 0) {
        throw InvalidArgument("query encoder: sizes must be positive");
    }
    CounterRng rng = CounterRng(seed).split("query-encoder");
    const std::size_t fan_in = patch_ * patch_ * channels_;
    CounterRng w = rng.split("projection");
    CounterRng b = rng.split("bias");
    projection_ = gaussian_tensor({fan_in, dim_}, 1.0 / std::sqrt(static_cast<double>(fan_in)), w);
    bias_ = gaussian_tensor({dim_}, 0.5, b);
}

std::vector<double> PatchQueryEncoder::pooled(std::span<const double> frame, std::size_t height,
                                              std::size_t width) const
{
    if (height < patch_ || width < patch_) {
        throw InvalidArgument("query encoder: frame " + std::to_string(height) + "x" + std::to_string(width) +
                              " is smaller than one " + std::to_string(patch_) + "x" + std::to_string(patch_) +
                              " patch");
    }
    if (frame.size() != height * width * channels_) {
        throw InvalidArgument("query encoder: frame length mismatch");
    }
    // Linear projection commutes with the mean, so pool the patches first.
    const std::size_t py = height / patch_;
    const std::size_t px = width / patch_;
    const std::size_t fan_in = patch_ * patch_ * channels_;
    std::vector<double> mean_patch(fan_in, 0.0);
    for (std::size_t by = 0; by < py; ++by) {
        for (std::size_t bx = 0; bx < px; ++bx) {
            for (std::size_t y = 0; y < patch_; ++y) {
                for (std::size_t x = 0; x < patch_; ++x) {
                    const std::size_t src = ((by * patch_ + y) * width + bx * patch_ + x) * channels_;
                    const std::size_t dst = (y * patch_ + x) * channels_;
                    for (std::size_t c = 0; c < channels_; ++c) {
                        mean_patch[dst + c] += frame[src + c];
                    }
                }
            }
        }
    }
    const double inv = 1.0 / static_cast<double>(py * px);
    std::vector<double> out(bias_.values().begin(), bias_.values().end());
    for (std::size_t i = 0; i < fan_in; ++i) {
        const double v = mean_patch[i] * inv;
        for (std::size_t d = 0; d < dim_; ++d) {
            out[d] += v * projection_[i * dim_ + d];
        }
    }
    return out;
}

QueryEmbedding PatchQueryEncoder::encode_frame(std::span<const double> frame, std::size_t height,
                                               std::size_t width) const
{
    return {normalized(pooled(frame, height, width)), id()};
}

QueryEmbedding PatchQueryEncoder::query(const VideoSample& sample) const
{
    if (sample.frames == 0) {
        throw InvalidArgument("query encoder: clip has no frames");
    }
    std::vector<double> first(sample.pixels.begin(),
                              sample.pixels.begin() + static_cast<std::ptrdiff_t>(sample.frame_size()));
    return encode_frame(first, sample.height, sample.width);
}

PrecomputedQueryEncoder::PrecomputedQueryEncoder(std::string source, std::map<std::string, std::vector<double>> table)
    : source_(std::move(source)), table_(std::move(table))
{}

PrecomputedQueryEncoder PrecomputedQueryEncoder::from_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open query table " + path.string());
    }
    try {
        const auto doc = nlohmann::json::parse(in);
        const auto dim = doc.at("dim").get<std::size_t>();
        std::map<std::string, std::vector<double>> table;
        for (const auto& [id, values] : doc.at("queries").items()) {
            auto v = values.get<std::vector<double>>();
            if (v.size() != dim) {
                throw ParseError("query_table", "query for '" + id + "' has wrong length");
            }
            table.emplace(id, normalized(std::move(v)));
        }
        return PrecomputedQueryEncoder(doc.value("source", std::string("external")), std::move(table));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("query_table", e.what());
    }
}

QueryEmbedding PrecomputedQueryEncoder::query(const VideoSample& sample) const
{
    const auto it = table_.find(sample.sample_id);
    if (it == table_.end()) {
        throw InvalidArgument("query table has no entry for sample '" + sample.sample_id + "'");
    }
    return {it->second, source_};
}

std::vector<std::size_t> match(std::span<const double> query, const Tensor& keys, std::size_t top_n)
{
    const std::size_t m = keys.dim(0);
    const std::size_t d = keys.dim(1);
    if (top_n < 1 || top_n > m) {
        throw InvalidArgument("match: top_n must lie in [1, " + std::to_string(m) + "]");
    }
    if (query.size() != d) {
        throw InvalidArgument("match: query dim mismatch");
    }
    double qn = 0.0;
    for (double v : query) {
        qn += v * v;
    }
    qn = std::sqrt(qn);
    std::vector<double> score(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        double kn = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            dot += query[k] * keys[i * d + k];
            kn += keys[i * d + k] * keys[i * d + k];
        }
        kn = std::sqrt(kn);
        score[i] = (qn < 1e-12 || kn < 1e-12) ? 0.0 : dot / (qn * kn);
    }
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    order.resize(top_n);
    return order;
}

std::vector<std::size_t> match(const QueryEmbedding& query, const PromptPool& pool, std::size_t top_n)
{
    return match(query.vector, pool.keys().value(), top_n);
}

ag::Var prompt_loss(const QueryEmbedding& query, const PromptPool& pool, std::uint32_t view_id)
{
    const std::size_t d = pool.embed_dim();
    if (query.vector.size() != d) {
        throw InvalidArgument("prompt_loss: query dim mismatch");
    }
    const ag::Var q = ag::Var::constant(Tensor(Shape{d}, query.vector));
    std::vector<ag::Var> terms;
    for (std::size_t key : pool.keys_of_view(view_id)) {
        terms.push_back(ag::cosine(q, ag::slice(pool.keys(), key * d, {d})));
    }
    return ag::mean_of(terms);
}

std::uint32_t vote_view(std::span<const std::size_t> selected, const PromptPool& pool)
{
    if (selected.empty()) {
        throw InvalidArgument("vote_view: empty selection");
    }
    std::vector<std::size_t> votes(pool.num_views(), 0);
    for (std::size_t key : selected) {
        ++votes[pool.group_of_key(key)];
    }
    return static_cast<std::uint32_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

ag::Var fuse_values(std::span<const std::size_t> selected, const PromptPool& pool)
{
    if (selected.empty()) {
        throw InvalidArgument("fuse_values: empty selection");
    }
    const std::size_t length = pool.config().prompt_length;
    std::vector<std::size_t> rows;
    for (std::size_t key : selected) {
        if (key >= pool.size()) {
            throw InvalidArgument("fuse_values: key index out of range");
        }
        for (std::size_t l = 0; l < length; ++l) {
            rows.push_back(key * length + l);
        }
    }
    const ag::Var table = ag::reshape(pool.values(), {pool.size() * length, pool.embed_dim()});
    return ag::mean_selected_rows(table, rows);
}

} // namespace echoprompt
