#include "doctest.h"

#include "support.hpp"

#include "echoprompt/evaluation.hpp"

#include <cmath>

using namespace echoprompt;
using namespace echoprompt::testing;

TEST_CASE("dice examples")
{
    const std::vector<std::uint8_t> g = {1, 1, 1, 1, 0, 0, 0, 0};
    CHECK(dice(g, g) == 1.0);
    CHECK(dice(g, std::vector<std::uint8_t>{0, 0, 0, 0, 1, 1, 1, 1}) == 0.0);
    CHECK(dice(std::vector<std::uint8_t>{1, 1, 0, 0, 0, 0, 0, 0}, g) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(dice(std::vector<std::uint8_t>(8, 0), std::vector<std::uint8_t>(8, 0)) == 1.0);
}

TEST_CASE("untrained model gives in-range cells and a valid document")
{
    const EchoPromptModel model(ModelConfig{});
    const auto samples = toy_samples(3, 1);
    MetricsDocument m = evaluate(model, samples);
    REQUIRE(m.per_view.size() == 3);
    double sum = 0.0;
    for (const ViewDice& v : m.per_view) {
        REQUIRE(v.classes.size() == 2);
        for (const ClassDice& c : v.classes) {
            CHECK(std::isfinite(c.dice));
            CHECK(c.dice >= 0.0);
            CHECK(c.dice <= 1.0);
            sum += c.dice;
        }
    }
    CHECK(std::abs(m.mean_dice - sum / 6) < 1e-12);
    for (std::size_t v = 0; v < 3; ++v) {
        std::size_t row = 0;
        for (auto n : m.view_confusion[v]) row += n;
        CHECK(row == 1);
    }
    m.config = {{"note", "test"}};
    const nlohmann::json doc = nlohmann::json::parse(metrics_to_json(m).dump());
    CHECK(metrics_schema_errors(doc).empty());

    CHECK(evaluate(model, samples, true).view_accuracy == 1.0);
}

TEST_CASE("pool keys set to each view's mean query retrieve every view")
{
    EchoPromptModel model(ModelConfig{});
    const auto samples = toy_samples(4, 4);
    const std::size_t d = model.pool().embed_dim();
    std::vector<std::vector<double>> means(3, std::vector<double>(d, 0.0));
    for (const VideoSample& s : samples) {
        const QueryEmbedding q = model.query(s);
        for (std::size_t j = 0; j < d; ++j) means[s.view_id][j] += q.vector[j];
    }
    for (std::uint32_t v = 0; v < 3; ++v)
        for (auto k : model.pool().keys_of_view(v))
            std::copy(means[v].begin(), means[v].end(), model.pool().keys().mutable_value().data() + k * d);

    const MetricsDocument m = evaluate(model, samples);
    CHECK(m.view_accuracy == 1.0);
    for (std::size_t v = 0; v < 3; ++v) CHECK(m.view_confusion[v][v] == 4);
}

TEST_CASE("schema check catches malformed documents")
{
    const auto valid = nlohmann::json::parse(R"({"per_view": {"A2C": {"x": 0.5, "y": 0.7}}, "mean_dice": 0.6,
        "view_accuracy": 1.0, "view_confusion": [[1, 0], [0, 1]], "config": {}})");
    CHECK(metrics_schema_errors(valid).empty());

    nlohmann::json bad = valid;
    bad["mean_dice"] = 0.61;
    CHECK_FALSE(metrics_schema_errors(bad).empty());
    bad = valid;
    bad["per_view"]["A2C"]["x"] = 1.5;
    CHECK_FALSE(metrics_schema_errors(bad).empty());
    bad = valid;
    bad["view_confusion"] = {{1, 0}};
    CHECK_FALSE(metrics_schema_errors(bad).empty());
    bad = valid;
    bad.erase("config");
    CHECK_FALSE(metrics_schema_errors(bad).empty());
    bad = valid;
    bad["view_confusion"][0][0] = -1;
    CHECK_FALSE(metrics_schema_errors(bad).empty());
}
