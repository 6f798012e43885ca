#pragma once

#include "echoprompt/nn.hpp"
#include "echoprompt/synthetic_data.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace echoprompt {

struct PromptPoolConfig {
    std::size_t num_views = 3;
    std::size_t prompts_per_view = 3;
    std::size_t prompt_length = 4;  // tokens per value
    std::size_t embed_dim = 64;
    double init_std = 0.02;
};

/// M = num_views * prompts_per_view learnable (key, value) pairs. Keys are
/// [M, D], values [M, L, D]; key m belongs to view m / prompts_per_view.
class PromptPool {
public:
    PromptPool(const PromptPoolConfig& config, CounterRng rng);

    std::size_t size() const noexcept { return config_.num_views * config_.prompts_per_view; }
    std::size_t num_views() const noexcept { return config_.num_views; }
    std::size_t embed_dim() const noexcept { return config_.embed_dim; }
    const PromptPoolConfig& config() const noexcept { return config_; }

    std::uint32_t group_of_key(std::size_t key) const;
    std::vector<std::size_t> keys_of_view(std::uint32_t view) const;

    const ag::Var& keys() const noexcept { return keys_; }
    const ag::Var& values() const noexcept { return values_; }
    ag::Var& keys() noexcept { return keys_; }
    ag::Var& values() noexcept { return values_; }

private:
    PromptPoolConfig config_;
    ag::Var keys_;
    ag::Var values_;
};

struct QueryEmbedding {
    std::vector<double> vector;  // unit norm
    std::string source;
};

/// Frozen encoder mapping a clip to the query used for key matching.
class QueryEncoder {
public:
    virtual ~QueryEncoder() = default;
    virtual QueryEmbedding query(const VideoSample& sample) const = 0;
};

/// Splits the first frame into S x S patches, projects each with a frozen
/// seeded linear map (+ bias) to D, mean-pools and L2-normalises.
class PatchQueryEncoder final : public QueryEncoder {
public:
    PatchQueryEncoder(std::size_t patch_size, std::size_t embed_dim, std::uint64_t seed, std::size_t channels = 1);

    QueryEmbedding query(const VideoSample& sample) const override;
    /// Same pipeline on a raw [H, W, C] frame.
    QueryEmbedding encode_frame(std::span<const double> frame, std::size_t height, std::size_t width) const;
    /// Mean of the projected patches before normalisation.
    std::vector<double> pooled(std::span<const double> frame, std::size_t height, std::size_t width) const;

    std::size_t patch_size() const noexcept { return patch_; }
    const Tensor& projection() const noexcept { return projection_; }  // [S*S*C, D]
    const Tensor& bias() const noexcept { return bias_; }              // [D]
    Tensor& projection() noexcept { return projection_; }
    Tensor& bias() noexcept { return bias_; }

    std::string id() const { return "patch-linear-s" + std::to_string(patch_); }

private:
    std::size_t patch_;
    std::size_t channels_;
    std::size_t dim_;
    Tensor projection_;
    Tensor bias_;
};

/// Query vectors computed out of process, keyed by sample id. File format:
/// {"source": str, "dim": D, "queries": {sample_id: [D floats]}}.
class PrecomputedQueryEncoder final : public QueryEncoder {
public:
    static PrecomputedQueryEncoder from_file(const std::filesystem::path& path);
    QueryEmbedding query(const VideoSample& sample) const override;

private:
    PrecomputedQueryEncoder(std::string source, std::map<std::string, std::vector<double>> table);
    std::string source_;
    std::map<std::string, std::vector<double>> table_;
};

/// Indices of the `top_n` keys with highest cosine to `query`, descending,
/// ties to the lower index.
std::vector<std::size_t> match(std::span<const double> query, const Tensor& keys, std::size_t top_n);
std::vector<std::size_t> match(const QueryEmbedding& query, const PromptPool& pool, std::size_t top_n);

/// Mean cosine between the query and the keys of `view_id` (to be maximised).
ag::Var prompt_loss(const QueryEmbedding& query, const PromptPool& pool, std::uint32_t view_id);

/// View owning most of the selected keys; ties to the lowest view id.
std::uint32_t vote_view(std::span<const std::size_t> selected, const PromptPool& pool);

/// Mean over the selected values and their tokens -> [D].
ag::Var fuse_values(std::span<const std::size_t> selected, const PromptPool& pool);

} // namespace echoprompt
