#include "echoprompt/text_prompts.hpp"

#include "echoprompt/error.hpp"
#include "echoprompt/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

namespace echoprompt {

std::string render_prompt(std::string_view class_name)
{
    if (class_name.empty()) {
        throw InvalidArgument("render_prompt: empty class name");
    }
    return "An echocardiography of " + std::string(class_name) + ".";
}

void validate_class_names(std::span<const std::string> class_names)
{
    if (class_names.empty()) {
        throw InvalidArgument("class list is empty");
    }
    static constexpr std::string_view kViewTokens[] = {"a2c", "a4c", "psax"};
    std::set<std::string> seen;
    for (const auto& name : class_names) {
        if (name.empty()) {
            throw InvalidArgument("class name is empty");
        }
        std::string lower(name.size(), '\0');
        std::transform(name.begin(), name.end(), lower.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        for (auto token : kViewTokens) {
            if (lower.find(token) != std::string::npos) {
                throw InvalidArgument("class name '" + name + "' carries view information (" +
                                      std::string(token) + "); text prompts must name chambers only");
            }
        }
        if (lower == kBackgroundClass) {
            throw InvalidArgument("class name 'background' is reserved");
        }
        if (!seen.insert(name).second) {
            throw InvalidArgument("duplicate class name '" + name + "'");
        }
    }
}

HashTextProvider::HashTextProvider(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed)
{
    if (dim == 0) {
        throw InvalidArgument("text embedding dim must be positive");
    }
}

Tensor HashTextProvider::embed(std::span<const std::string> class_names) const
{
    Tensor out(Shape{class_names.size(), dim_});
    for (std::size_t i = 0; i < class_names.size(); ++i) {
        CounterRng rng(fnv1a64(render_prompt(class_names[i])) ^ mix64(seed_));
        for (std::size_t d = 0; d < dim_; ++d) {
            out[i * dim_ + d] = rng.normal();
        }
    }
    return out;
}

OneHotTextProvider::OneHotTextProvider(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed)
{
    if (dim == 0) {
        throw InvalidArgument("text embedding dim must be positive");
    }
}

Tensor OneHotTextProvider::embed(std::span<const std::string> class_names) const
{
    // Row i of the projection [count, D] is the image of one-hot code e_i.
    const std::size_t count = class_names.size();
    CounterRng rng = CounterRng(seed_).split("onehot-projection").split(count);
    Tensor projection(Shape{count, dim_});
    for (double& v : projection.storage()) {
        v = rng.normal() / std::sqrt(static_cast<double>(count));
    }
    Tensor out(Shape{count, dim_}, 0.0);
    for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t j = 0; j < count; ++j) {
            const double code = i == j ? 1.0 : 0.0;
            for (std::size_t d = 0; d < dim_; ++d) {
                out[i * dim_ + d] += code * projection[j * dim_ + d];
            }
        }
    }
    return out;
}

CachedTextProvider::CachedTextProvider(std::string source_id, std::size_t dim,
                                       std::map<std::string, std::vector<double>> vectors)
    : source_id_(std::move(source_id)), dim_(dim), vectors_(std::move(vectors))
{}

CachedTextProvider CachedTextProvider::from_json(std::string_view text)
{
    try {
        const auto doc = nlohmann::json::parse(text);
        const auto dim = doc.at("dim").get<std::size_t>();
        if (dim == 0) {
            throw ParseError("embedding_cache", "dim must be positive");
        }
        std::map<std::string, std::vector<double>> vectors;
        for (const auto& [prompt, values] : doc.at("vectors").items()) {
            auto v = values.get<std::vector<double>>();
            if (v.size() != dim) {
                throw ParseError("embedding_cache", "vector for '" + prompt + "' has length " +
                                                        std::to_string(v.size()) + ", expected " +
                                                        std::to_string(dim));
            }
            vectors.emplace(prompt, std::move(v));
        }
        return CachedTextProvider(doc.at("provider_id").get<std::string>(), dim, std::move(vectors));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("embedding_cache", e.what());
    }
}

CachedTextProvider CachedTextProvider::from_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open embedding cache " + path.string());
    }
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json(text);
}

Tensor CachedTextProvider::embed(std::span<const std::string> class_names) const
{
    std::vector<std::string> missing;
    Tensor out(Shape{class_names.size(), dim_});
    for (std::size_t i = 0; i < class_names.size(); ++i) {
        const auto it = vectors_.find(render_prompt(class_names[i]));
        if (it == vectors_.end()) {
            missing.push_back(class_names[i]);
            continue;
        }
        std::copy(it->second.begin(), it->second.end(), out.data() + i * dim_);
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) {
            list += (list.empty() ? "" : ", ") + m;
        }
        throw InvalidArgument("embedding cache '" + source_id_ + "' is missing classes: " + list);
    }
    return out;
}

TextEmbeddingMatrix embed_classes(const TextProvider& provider, std::span<const std::string> class_names)
{
    validate_class_names(class_names);
    std::vector<std::string> names(class_names.begin(), class_names.end());
    names.emplace_back(kBackgroundClass);
    Tensor rows = provider.embed(names);
    const std::size_t d = provider.dim();
    for (std::size_t i = 0; i < names.size(); ++i) {
        double norm = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            norm += rows[i * d + k] * rows[i * d + k];
        }
        norm = std::sqrt(norm);
        if (norm < 1e-12) {
            throw InvalidArgument("text embedding for '" + names[i] + "' has zero norm");
        }
        for (std::size_t k = 0; k < d; ++k) {
            rows[i * d + k] /= norm;
        }
    }
    return {std::move(rows), std::move(names), provider.id(), true};
}

void write_embedding_cache(const TextProvider& provider, std::span<const std::string> class_names,
                           const std::filesystem::path& path)
{
    std::vector<std::string> names(class_names.begin(), class_names.end());
    names.emplace_back(kBackgroundClass);
    const Tensor rows = provider.embed(names);
    nlohmann::ordered_json doc;
    doc["provider_id"] = provider.id();
    doc["dim"] = provider.dim();
    doc["vectors"] = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto r = rows.values().subspan(i * provider.dim(), provider.dim());
        doc["vectors"][render_prompt(names[i])] = std::vector<double>(r.begin(), r.end());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out << doc.dump(2) << "\n";
}

} // namespace echoprompt
