#pragma once

#include "echoprompt/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace echoprompt {

/// "An echocardiography of {class_name}."
std::string render_prompt(std::string_view class_name);

inline constexpr std::string_view kBackgroundClass = "background";

/// Frozen class embeddings: N foreground rows followed by one background row.
struct TextEmbeddingMatrix {
    Tensor rows;  // [N + 1, D]
    std::vector<std::string> class_names;  // foreground..., "background"
    std::string provider_id;
    bool normalized = false;

    std::size_t foreground_count() const noexcept { return class_names.empty() ? 0 : class_names.size() - 1; }
    std::size_t dim() const noexcept { return rows.rank() == 2 ? rows.dim(1) : 0; }
    std::span<const double> row(std::size_t i) const { return rows.values().subspan(i * dim(), dim()); }
};

/// Source of raw (unnormalised) class vectors.
class TextProvider {
public:
    virtual ~TextProvider() = default;
    virtual std::string id() const = 0;
    virtual std::size_t dim() const = 0;
    /// One row per class name, [names.size(), dim()].
    virtual Tensor embed(std::span<const std::string> class_names) const = 0;
};

/// Seeded Gaussian row per rendered prompt, keyed by the FNV-1a hash of the
/// prompt string.
class HashTextProvider final : public TextProvider {
public:
    explicit HashTextProvider(std::size_t dim, std::uint64_t seed = 0);
    std::string id() const override { return "deterministic_hash"; }
    std::size_t dim() const override { return dim_; }
    Tensor embed(std::span<const std::string> class_names) const override;

private:
    std::size_t dim_;
    std::uint64_t seed_;
};

/// Precomputed vectors loaded from a JSON cache
/// {"provider_id": str, "dim": D, "vectors": {prompt: [D floats]}}.
class CachedTextProvider final : public TextProvider {
public:
    static CachedTextProvider from_file(const std::filesystem::path& path);
    static CachedTextProvider from_json(std::string_view text);

    std::string id() const override { return "cached_external:" + source_id_; }
    std::size_t dim() const override { return dim_; }
    Tensor embed(std::span<const std::string> class_names) const override;

private:
    CachedTextProvider(std::string source_id, std::size_t dim, std::map<std::string, std::vector<double>> vectors);

    std::string source_id_;
    std::size_t dim_;
    std::map<std::string, std::vector<double>> vectors_;
};

/// One-hot class codes mapped to D dimensions by a fixed seeded linear map.
class OneHotTextProvider final : public TextProvider {
public:
    explicit OneHotTextProvider(std::size_t dim, std::uint64_t seed = 0);
    std::string id() const override { return "onehot"; }
    std::size_t dim() const override { return dim_; }
    Tensor embed(std::span<const std::string> class_names) const override;

private:
    std::size_t dim_;
    std::uint64_t seed_;
};

/// Rejects empty names, duplicates, the reserved background name and names
/// carrying view tokens (A2C, A4C, PSAX; case-insensitive).
void validate_class_names(std::span<const std::string> class_names);

/// Embeds the foreground classes plus the background row and L2-normalises
/// every row.
TextEmbeddingMatrix embed_classes(const TextProvider& provider, std::span<const std::string> class_names);

/// Writes an embedding cache file for the given class names from any provider.
void write_embedding_cache(const TextProvider& provider, std::span<const std::string> class_names,
                           const std::filesystem::path& path);

} // namespace echoprompt
