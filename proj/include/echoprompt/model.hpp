#pragma once

#include "echoprompt/dynamic_heads.hpp"
#include "echoprompt/pixel_text_alignment.hpp"
#include "echoprompt/prompt_pool.hpp"
#include "echoprompt/text_prompts.hpp"
#include "echoprompt/video_backbone.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace echoprompt {

enum class TextProviderKind { hash, cached, onehot };

std::string_view to_string(TextProviderKind k) noexcept;
TextProviderKind parse_text_provider(std::string_view name);

/// Which prompt values feed the parameter generator.
enum class PromptSelection {
    matched,   // top-n keys retrieved by the query
    assigned,  // the keys owned by the sample's ground-truth view
};

std::string_view to_string(PromptSelection s) noexcept;
PromptSelection parse_prompt_selection(std::string_view name);

struct ModelConfig {
    BackboneConfig backbone;
    std::size_t prompts_per_view = 3;
    std::size_t prompt_length = 4;
    double prompt_init_std = 0.02;
    std::size_t head_width = 8;
    std::size_t patch_size = 8;
    std::size_t top_n = 3;
    bool use_text_path = true;
    TextProviderKind text_provider = TextProviderKind::hash;
    std::string text_cache;  // required for the cached provider
    std::uint64_t seed = 0;
    std::vector<std::string> class_names = default_class_names();
    std::vector<std::string> view_names = {"A2C", "A4C", "PSAX"};

    HeadShape head_shape() const { return {backbone.decoder_channels, head_width}; }
    PromptPoolConfig pool_config() const;
};

nlohmann::ordered_json model_config_to_json(const ModelConfig& config);
/// Absent keys keep their defaults; unknown keys are rejected.
ModelConfig model_config_from_json(const nlohmann::json& doc);

/// Builds and normalises the class embeddings selected by the config.
TextEmbeddingMatrix build_text_embeddings(const ModelConfig& config);

/// [T, H, W] float pixels -> [T, H, W, 1] tensor.
Tensor video_tensor(const VideoSample& sample);

struct ForwardResult {
    ag::Var logits;       // [T, H, W, N]
    ag::Var scores;       // [T, Hb, Wb, N + 1]; undefined without the text path
    FeaturePyramid pyramid;
    ag::Var features;     // decoder output [T, H, W, C_dec]
    ag::Var global;       // [D]
    ag::Var prompt;       // fused prompt value [D]
    QueryEmbedding query;
    std::vector<std::size_t> matched;   // top-n keys by cosine
    std::vector<std::size_t> selected;  // keys whose values were used
    std::uint32_t voted_view = 0;
    std::vector<HeadParams> heads;
};

struct Prediction {
    Tensor probabilities;  // [T, H, W, N] in [0, 1]
    std::uint32_t view = 0;
    std::vector<std::size_t> matched;
};

class EchoPromptModel {
public:
    EchoPromptModel(const ModelConfig& config, TextEmbeddingMatrix text);
    explicit EchoPromptModel(const ModelConfig& config);

    ForwardResult forward(const VideoSample& sample, PromptSelection selection) const;

    /// Per-class head logits on given decoder features; text row c only
    /// influences class c.
    ag::Var class_logits(const ag::Var& features, const ag::Var& prompt, const ag::Var& global) const;

    /// With `use_view_info` the prompt comes from the true view's keys and
    /// that view is reported; otherwise both come from key matching.
    Prediction predict(const VideoSample& sample, bool use_view_info = false) const;

    const ModelConfig& config() const noexcept { return config_; }
    const TextEmbeddingMatrix& text() const noexcept { return text_; }
    const VideoBackbone& backbone() const noexcept { return backbone_; }
    const PromptPool& pool() const noexcept { return pool_; }
    PromptPool& pool() noexcept { return pool_; }
    const ParamGenerator& generator() const noexcept { return generator_; }
    const PatchQueryEncoder& query_encoder() const noexcept { return query_encoder_; }
    std::size_t fused_channels() const noexcept { return backbone_.fused_channels(); }

    /// Overrides the default patch encoder, e.g. with precomputed queries.
    void set_query_source(std::shared_ptr<const QueryEncoder> source) { query_source_ = std::move(source); }
    QueryEmbedding query(const VideoSample& sample) const;

    /// Trainable parameters keyed by group: backbone, pool_keys, pool_values, generator.
    std::map<std::string, std::vector<NamedParam>> parameter_groups() const;
    std::vector<NamedParam> parameters() const;

    /// Every tensor that defines the model, trainable and frozen, by name.
    std::vector<std::pair<std::string, Tensor*>> named_tensors();
    std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;

private:
    ModelConfig config_;
    TextEmbeddingMatrix text_;
    VideoBackbone backbone_;
    PromptPool pool_;
    ParamGenerator generator_;
    PatchQueryEncoder query_encoder_;
    std::shared_ptr<const QueryEncoder> query_source_;
};

} // namespace echoprompt
