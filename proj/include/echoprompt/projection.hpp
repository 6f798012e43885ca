#pragma once

#include "echoprompt/model.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace echoprompt {

struct EmbeddingRow {
    std::string type;   // "key" or "query"
    std::string label;  // key index or sample id
    std::string group;  // owning view or true view
    std::vector<double> values;
};

/// All pool keys followed by one query per sample.
std::vector<EmbeddingRow> embedding_rows(const EchoPromptModel& model, std::span<const VideoSample> samples);

/// Header "type,label,group,d0,...,d{D-1}"; values printed with 17 significant digits.
std::string embeddings_to_csv(std::span<const EmbeddingRow> rows);
std::vector<EmbeddingRow> embeddings_from_csv(std::string_view text);

struct Projection2D {
    std::vector<std::array<double, 2>> coords;  // one per row
    std::array<std::vector<double>, 2> components;
    std::array<double, 2> variances{};
    std::vector<double> mean;
};

/// Exact top-2 principal components of the centred rows. Each component is
/// signed so that its largest-magnitude loading is positive. Throws with
/// fewer than 3 rows.
Projection2D pca2(std::span<const EmbeddingRow> rows);

/// Deterministic scatter plot coloured by group, circles for queries and
/// squares for keys.
std::string render_svg(std::span<const EmbeddingRow> rows, const Projection2D& projection);

} // namespace echoprompt
