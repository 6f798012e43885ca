#include "echoprompt/model.hpp"

#include "echoprompt/error.hpp"

#include <set>

namespace echoprompt {

std::string_view to_string(TextProviderKind k) noexcept
{
    switch (k) {
    case TextProviderKind::hash: return "hash";
    case TextProviderKind::cached: return "cached";
    case TextProviderKind::onehot: return "onehot";
    }
    return "hash";
}

TextProviderKind parse_text_provider(std::string_view name)
{
    if (name == "hash") return TextProviderKind::hash;
    if (name == "cached") return TextProviderKind::cached;
    if (name == "onehot") return TextProviderKind::onehot;
    throw InvalidArgument("unknown text provider '" + std::string(name) + "' (expected hash, cached or onehot)");
}

std::string_view to_string(PromptSelection s) noexcept { return s == PromptSelection::matched ? "matched" : "assigned"; }

PromptSelection parse_prompt_selection(std::string_view name)
{
    if (name == "matched") return PromptSelection::matched;
    if (name == "assigned") return PromptSelection::assigned;
    throw InvalidArgument("unknown value selection '" + std::string(name) + "' (expected matched or assigned)");
}

PromptPoolConfig ModelConfig::pool_config() const
{
    PromptPoolConfig p;
    p.num_views = view_names.size();
    p.prompts_per_view = prompts_per_view;
    p.prompt_length = prompt_length;
    p.embed_dim = backbone.embed_dim;
    p.init_std = prompt_init_std;
    return p;
}

nlohmann::ordered_json model_config_to_json(const ModelConfig& c)
{
    nlohmann::ordered_json j;
    j["backbone"] = {{"depth", c.backbone.depth},
                     {"base_channels", c.backbone.base_channels},
                     {"embed_dim", c.backbone.embed_dim},
                     {"decoder_channels", c.backbone.decoder_channels},
                     {"in_channels", c.backbone.in_channels}};
    j["prompts_per_view"] = c.prompts_per_view;
    j["prompt_length"] = c.prompt_length;
    j["prompt_init_std"] = c.prompt_init_std;
    j["head_width"] = c.head_width;
    j["patch_size"] = c.patch_size;
    j["top_n"] = c.top_n;
    j["use_text_path"] = c.use_text_path;
    j["text_provider"] = std::string(to_string(c.text_provider));
    j["text_cache"] = c.text_cache;
    j["seed"] = c.seed;
    j["class_names"] = c.class_names;
    j["view_names"] = c.view_names;
    return j;
}

namespace {

template <class T>
void read_field(const nlohmann::json& doc, const char* key, T& out, const std::string& where)
{
    if (!doc.contains(key)) {
        return;
    }
    try {
        out = doc.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw InvalidArgument(where + key + ": wrong type");
    }
}

void reject_unknown(const nlohmann::json& doc, const std::set<std::string>& known, const std::string& where)
{
    for (const auto& [key, _] : doc.items()) {
        if (!known.contains(key)) {
            throw InvalidArgument(where + key + ": unknown field");
        }
    }
}

} // namespace

ModelConfig model_config_from_json(const nlohmann::json& doc)
{
    if (!doc.is_object()) {
        throw InvalidArgument("model: expected an object");
    }
    reject_unknown(doc,
                   {"backbone", "prompts_per_view", "prompt_length", "prompt_init_std", "head_width", "patch_size",
                    "top_n", "use_text_path", "text_provider", "text_cache", "seed", "class_names", "view_names"},
                   "model.");
    ModelConfig c;
    if (doc.contains("backbone")) {
        const auto& b = doc.at("backbone");
        if (!b.is_object()) {
            throw InvalidArgument("model.backbone: expected an object");
        }
        reject_unknown(b, {"depth", "base_channels", "embed_dim", "decoder_channels", "in_channels"},
                       "model.backbone.");
        read_field(b, "depth", c.backbone.depth, "model.backbone.");
        read_field(b, "base_channels", c.backbone.base_channels, "model.backbone.");
        read_field(b, "embed_dim", c.backbone.embed_dim, "model.backbone.");
        read_field(b, "decoder_channels", c.backbone.decoder_channels, "model.backbone.");
        read_field(b, "in_channels", c.backbone.in_channels, "model.backbone.");
    }
    read_field(doc, "prompts_per_view", c.prompts_per_view, "model.");
    read_field(doc, "prompt_length", c.prompt_length, "model.");
    read_field(doc, "prompt_init_std", c.prompt_init_std, "model.");
    read_field(doc, "head_width", c.head_width, "model.");
    read_field(doc, "patch_size", c.patch_size, "model.");
    read_field(doc, "top_n", c.top_n, "model.");
    read_field(doc, "use_text_path", c.use_text_path, "model.");
    std::string provider(to_string(c.text_provider));
    read_field(doc, "text_provider", provider, "model.");
    c.text_provider = parse_text_provider(provider);
    read_field(doc, "text_cache", c.text_cache, "model.");
    read_field(doc, "seed", c.seed, "model.");
    read_field(doc, "class_names", c.class_names, "model.");
    read_field(doc, "view_names", c.view_names, "model.");
    return c;
}

TextEmbeddingMatrix build_text_embeddings(const ModelConfig& config)
{
    const std::size_t d = config.backbone.embed_dim;
    const std::uint64_t seed = CounterRng(config.seed).split("text").key();
    switch (config.text_provider) {
    case TextProviderKind::hash: return embed_classes(HashTextProvider(d, seed), config.class_names);
    case TextProviderKind::onehot: return embed_classes(OneHotTextProvider(d, seed), config.class_names);
    case TextProviderKind::cached:
        if (config.text_cache.empty()) {
            throw InvalidArgument("text_cache: required by the cached text provider");
        }
        return embed_classes(CachedTextProvider::from_file(config.text_cache), config.class_names);
    }
    throw InvalidArgument("text_provider: unsupported");
}

Tensor video_tensor(const VideoSample& sample)
{
    Tensor t({sample.frames, sample.height, sample.width, 1});
    std::copy(sample.pixels.begin(), sample.pixels.end(), t.storage().begin());
    return t;
}

EchoPromptModel::EchoPromptModel(const ModelConfig& config) : EchoPromptModel(config, build_text_embeddings(config)) {}

EchoPromptModel::EchoPromptModel(const ModelConfig& config, TextEmbeddingMatrix text)
    : config_(config),
      text_(std::move(text)),
      backbone_(config.backbone, config.use_text_path ? config.class_names.size() : 0,
                CounterRng(config.seed).split("backbone")),
      pool_(config.pool_config(), CounterRng(config.seed).split("pool")),
      generator_(config.backbone.embed_dim, config.head_shape(), CounterRng(config.seed).split("generator")),
      query_encoder_(config.patch_size, config.backbone.embed_dim, CounterRng(config.seed).split("query").key(),
                     config.backbone.in_channels)
{
    if (text_.dim() != config.backbone.embed_dim) {
        throw InvalidArgument("model: text dim " + std::to_string(text_.dim()) + " != embed_dim " +
                              std::to_string(config.backbone.embed_dim));
    }
    if (text_.foreground_count() != config.class_names.size()) {
        throw InvalidArgument("model: text matrix has " + std::to_string(text_.foreground_count()) +
                              " foreground rows for " + std::to_string(config.class_names.size()) + " classes");
    }
    if (config.top_n < 1 || config.top_n > pool_.size()) {
        throw InvalidArgument("model: top_n must lie in [1, " + std::to_string(pool_.size()) + "]");
    }
}

QueryEmbedding EchoPromptModel::query(const VideoSample& sample) const
{
    return query_source_ ? query_source_->query(sample) : query_encoder_.query(sample);
}

ag::Var EchoPromptModel::class_logits(const ag::Var& features, const ag::Var& prompt, const ag::Var& global) const
{
    const std::size_t n = text_.foreground_count();
    std::vector<ag::Var> per_class;
    per_class.reserve(n);
    for (std::size_t c = 0; c < n; ++c) {
        const HeadParams head = generator_.generate(text_.row(c), prompt, global, c);
        per_class.push_back(apply_head(features, head.theta, generator_.head()));
    }
    return ag::concat_channels(per_class);
}

ForwardResult EchoPromptModel::forward(const VideoSample& sample, PromptSelection selection) const
{
    if (sample.classes != text_.foreground_count()) {
        throw InvalidArgument("model: sample has " + std::to_string(sample.classes) + " classes, model has " +
                              std::to_string(text_.foreground_count()));
    }
    if (sample.view_id >= pool_.num_views()) {
        throw InvalidArgument("model: sample view " + std::to_string(sample.view_id) + " out of range");
    }
    ForwardResult r;
    r.query = query(sample);
    r.matched = match(r.query, pool_, config_.top_n);
    r.voted_view = vote_view(r.matched, pool_);
    r.selected = selection == PromptSelection::matched ? r.matched : pool_.keys_of_view(sample.view_id);
    r.prompt = fuse_values(r.selected, pool_);

    r.pyramid = backbone_.encode(ag::Var::constant(video_tensor(sample)));
    r.global = global_embedding(r.pyramid);
    ag::Var fused = r.pyramid.bottleneck();
    if (config_.use_text_path) {
        r.scores = score_map(r.pyramid.bottleneck(), text_);
        fused = fuse(r.scores, r.pyramid.bottleneck(), text_.foreground_count());
    }
    r.features = backbone_.decode(r.pyramid, fused);

    const std::size_t n = text_.foreground_count();
    std::vector<ag::Var> per_class;
    for (std::size_t c = 0; c < n; ++c) {
        HeadParams head = generator_.generate(text_.row(c), r.prompt, r.global, c);
        per_class.push_back(apply_head(r.features, head.theta, generator_.head()));
        r.heads.push_back(std::move(head));
    }
    r.logits = ag::concat_channels(per_class);
    return r;
}

Prediction EchoPromptModel::predict(const VideoSample& sample, bool use_view_info) const
{
    const ForwardResult r = forward(sample, use_view_info ? PromptSelection::assigned : PromptSelection::matched);
    Prediction p;
    p.probabilities = ag::sigmoid(r.logits).value();
    p.view = use_view_info ? sample.view_id : r.voted_view;
    p.matched = r.matched;
    return p;
}

std::map<std::string, std::vector<NamedParam>> EchoPromptModel::parameter_groups() const
{
    std::map<std::string, std::vector<NamedParam>> groups;
    groups["backbone"] = backbone_.parameters();
    groups["pool_keys"] = {{"pool.keys", pool_.keys()}};
    groups["pool_values"] = {{"pool.values", pool_.values()}};
    groups["generator"] = generator_.parameters();
    return groups;
}

std::vector<NamedParam> EchoPromptModel::parameters() const
{
    std::vector<NamedParam> out;
    for (const auto& [_, params] : parameter_groups()) {
        out.insert(out.end(), params.begin(), params.end());
    }
    return out;
}

std::vector<std::pair<std::string, Tensor*>> EchoPromptModel::named_tensors()
{
    std::vector<std::pair<std::string, Tensor*>> out;
    for (NamedParam& p : parameters()) {
        out.emplace_back(p.name, &p.var.mutable_value());
    }
    out.emplace_back("frozen.text.rows", &text_.rows);
    out.emplace_back("frozen.query.projection", &query_encoder_.projection());
    out.emplace_back("frozen.query.bias", &query_encoder_.bias());
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> EchoPromptModel::named_tensors() const
{
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& [name, t] : const_cast<EchoPromptModel*>(this)->named_tensors()) {
        out.emplace_back(name, t);
    }
    return out;
}

} // namespace echoprompt
