#include "doctest.h"

#include "support.hpp"

#include "echoprompt/error.hpp"
#include "echoprompt/training.hpp"

#include <cmath>

using namespace echoprompt;
using namespace echoprompt::testing;

namespace {

std::vector<VideoSample> tiny_batch(std::uint64_t seed, std::size_t count)
{
    std::vector<VideoSample> out;
    const CounterRng root(seed);
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(random_sample(root.split(i), 2, 8, 8, 2, static_cast<std::uint32_t>(i % 3), {0}));
    }
    return out;
}

TrainConfig tiny_train_config()
{
    TrainConfig c;
    c.model = tiny_model_config();
    c.steps = 6;
    c.batch_size = 2;
    c.learning_rate = 1e-3;
    c.seed = 3;
    return c;
}

std::vector<Tensor> snapshot(const EchoPromptModel& model)
{
    std::vector<Tensor> out;
    for (const auto& [_, t] : model.named_tensors()) out.push_back(*t);
    return out;
}

} // namespace

TEST_CASE("lambda schedule closed form")
{
    CHECK(std::abs(lambda_schedule(0, 500) - std::exp(-5.0)) < 1e-12);
    CHECK(std::abs(lambda_schedule(250, 500) - std::exp(-1.25)) < 1e-12);
    CHECK(lambda_schedule(500, 500) == 1.0);
    CHECK(lambda_schedule(0, 500) == doctest::Approx(6.7379e-3).epsilon(1e-4));
    CHECK(lambda_schedule(250, 500) == doctest::Approx(0.28650).epsilon(1e-4));
    for (std::size_t t = 0; t < 500; ++t) {
        CHECK(lambda_schedule(t + 1, 500) >= lambda_schedule(t, 500));
    }
    CHECK(lambda_schedule(900, 500) == 1.0);
    CHECK_THROWS_AS(lambda_schedule(0, 0), InvalidArgument);
}

TEST_CASE("masked BCE closed forms")
{
    VideoSample s = random_sample(CounterRng(1), 3, 4, 4, 2, 0, {0, 2});
    const std::size_t n = 3 * 4 * 4 * 2;
    Tensor perfect({3, 4, 4, 2});
    for (std::size_t i = 0; i < n; ++i) perfect[i] = s.masks[i] ? 100.0 : -100.0;
    const double near_zero = masked_bce(ag::Var::constant(perfect), s).value().item();
    CHECK(near_zero < 1e-6);
    CHECK(near_zero == doctest::Approx(std::log1p(std::exp(-15.0))).epsilon(1e-9));

    CHECK(masked_bce(ag::Var::constant(Tensor({3, 4, 4, 2})), s).value().item() == std::log(2.0));

    VideoSample unlabeled = s;
    unlabeled.labeled_frames.clear();
    std::fill(unlabeled.masks.begin(), unlabeled.masks.end(), 0);
    CHECK(masked_bce(ag::Var::constant(perfect), unlabeled).value().item() == 0.0);
    CHECK_THROWS_AS(masked_bce(ag::Var::constant(Tensor({3, 4, 4, 1})), s), InvalidArgument);
}

TEST_CASE("BCE gradient is exactly zero on unlabeled frames")
{
    VideoSample s = random_sample(CounterRng(2), 3, 4, 4, 2, 0, {1});
    CounterRng rng(3);
    ag::Var logits = ag::Var::parameter(random_tensor({3, 4, 4, 2}, rng, -5, 5));
    ag::backward(masked_bce(logits, s));
    const Tensor g = logits.grad();
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t i = 0; i < 32; ++i) {
            if (t == 1) {
                CHECK(g[t * 32 + i] != 0.0);
            } else {
                CHECK(g[t * 32 + i] == 0.0);
            }
        }
}

TEST_CASE("loss endpoints and recomposition")
{
    TrainConfig config = tiny_train_config();
    config.steps = 10;
    EchoPromptModel model(config.model);
    jitter_parameters(model, CounterRng(4), 0.05);
    const auto batch = tiny_batch(5, 3);

    const BatchLoss end = total_loss(model, batch, 10, config);
    CHECK(end.report.lambda_t == 1.0);
    CHECK(end.report.l_total == -end.report.l_pr);

    for (std::size_t t = 0; t <= 10; ++t) {
        for (bool reversed : {false, true}) {
            config.reversed_ramp = reversed;
            const LossReport r = total_loss(model, batch, t, config).report;
            CHECK(std::abs(r.l_total - recompose_total(r, config.lambda1, config.lambda2, reversed)) < 1e-8);
            CHECK(std::abs(r.l_seg - (r.l_pixel_text + r.l_bce)) < 1e-12);
            CHECK(r.lambda_t == lambda_schedule(t, 10));
            CHECK(std::isfinite(r.l_total));
        }
    }
    config.reversed_ramp = true;
    const LossReport start = total_loss(model, batch, 10, config).report;
    CHECK(start.l_total == start.l_seg);
}

TEST_CASE("l_pr is 1 when the view keys equal the query")
{
    TrainConfig config = tiny_train_config();
    EchoPromptModel model(config.model);
    const auto batch = tiny_batch(6, 1);
    const QueryEmbedding q = model.query(batch[0]);
    const std::size_t d = model.pool().embed_dim();
    for (auto k : model.pool().keys_of_view(batch[0].view_id)) {
        std::copy(q.vector.begin(), q.vector.end(), model.pool().keys().mutable_value().data() + k * d);
    }
    CHECK(total_loss(model, batch, 0, config).report.l_pr == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("without the text path the pixel-text term vanishes")
{
    TrainConfig config = tiny_train_config();
    config.model.use_text_path = false;
    const EchoPromptModel model(config.model);
    CHECK(model.fused_channels() == 8);
    const LossReport r = total_loss(model, tiny_batch(7, 2), 2, config).report;
    CHECK(r.l_pixel_text == 0.0);
    CHECK(r.l_seg == r.l_bce);
}

TEST_CASE("adam minimises a quadratic")
{
    ag::Var x = ag::Var::parameter(Tensor({3}, std::vector<double>{3.0, -2.0, 1.0}));
    Adam opt({{"x", x}}, 0.05);
    const Tensor target({3}, std::vector<double>{1.0, 1.0, 1.0});
    for (int i = 0; i < 2000; ++i) {
        opt.zero_grad();
        const ag::Var diff = ag::sub(x, ag::Var::constant(target));
        ag::backward(weighted_total(diff, diff.value()));
        opt.step();
    }
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(x.value()[i] - 1.0) < 1e-3);
    CHECK(opt.steps_taken() == 2000);
}

TEST_CASE("training is deterministic and leaves frozen tensors untouched")
{
    const TrainConfig config = tiny_train_config();
    const auto samples = tiny_batch(8, 5);
    EchoPromptModel a(config.model), b(config.model);
    const Tensor text_before = a.text().rows;
    const Tensor proj_before = a.query_encoder().projection();
    const Tensor bias_before = a.query_encoder().bias();
    const Tensor keys_before = a.pool().keys().value();

    const TrainResult ra = train(a, config, samples);
    const TrainResult rb = train(b, config, samples);
    REQUIRE_FALSE(ra.aborted);
    CHECK(ra.history.size() == config.steps);
    CHECK(snapshot(a) == snapshot(b));
    for (std::size_t i = 0; i < ra.history.size(); ++i) CHECK(ra.history[i].l_total == rb.history[i].l_total);

    CHECK(a.text().rows == text_before);
    CHECK(a.query_encoder().projection() == proj_before);
    CHECK(a.query_encoder().bias() == bias_before);
    CHECK_FALSE(a.pool().keys().value() == keys_before);
    for (const LossReport& r : ra.history) {
        CHECK(std::abs(r.l_total - recompose_total(r, 1.0, 1.0)) < 1e-8);
    }
}

TEST_CASE("divergence and NaN abort with the last good parameters")
{
    TrainConfig config = tiny_train_config();
    config.divergence_threshold = 1e-9;
    EchoPromptModel model(config.model);
    const auto before = snapshot(model);
    const TrainResult r = train(model, config, tiny_batch(9, 2));
    CHECK(r.aborted);
    CHECK(r.abort_reason.find("divergence") != std::string::npos);
    CHECK(r.history.empty());
    CHECK(snapshot(model) == before);

    config.divergence_threshold = 1e6;
    auto samples = tiny_batch(10, 2);
    samples[1].pixels[5] = std::nanf("");
    config.batch_size = 1;
    EchoPromptModel other(config.model);
    const TrainResult bad = train(other, config, samples);
    CHECK(bad.aborted);
    CHECK(bad.abort_reason.find("is not finite at step") != std::string::npos);
    // The snapshot restored is from before the failing step, so it is finite.
    for (const auto& [_, t] : other.named_tensors()) CHECK(t->all_finite());
}

TEST_CASE("train config JSON round trip and validation")
{
    TrainConfig c = tiny_train_config();
    c.pixel_text.kind = PixelTextLossKind::sigmoid;
    c.value_selection = PromptSelection::matched;
    c.augment.enabled = true;
    c.model.text_provider = TextProviderKind::onehot;
    const TrainConfig back = train_config_from_json(train_config_to_json(c));
    CHECK(train_config_to_json(back).dump() == train_config_to_json(c).dump());

    auto expect_field = [](const std::string& text, const std::string& field) {
        try {
            train_config_from_json(nlohmann::json::parse(text));
            FAIL("expected rejection of " << text);
        } catch (const InvalidArgument& e) {
            CHECK(std::string(e.what()).find(field) != std::string::npos);
        }
    };
    expect_field(R"({"stepz": 3})", "stepz");
    expect_field(R"({"steps": 0})", "steps");
    expect_field(R"({"learning_rate": "x"})", "learning_rate");
    expect_field(R"({"temperature": -1})", "temperature");
    expect_field(R"({"model": {"top_n": "a"}})", "top_n");
    expect_field(R"({"model": {"nope": 1}})", "nope");
    expect_field(R"({"pixel_text_loss": "hinge"})", "hinge");
}

TEST_CASE("augmentation")
{
    const VideoSample s = generate_sample(default_view_specs()[0], 4, {4, 16, 16, 2});
    CHECK(augment_sample(s, {}, CounterRng(1)) == s);

    AugmentConfig flip{true, 1.0, 0.0, 0.0};
    const VideoSample f = augment_sample(s, flip, CounterRng(1));
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t y = 0; y < 16; ++y)
            for (std::size_t x = 0; x < 16; ++x) {
                CHECK(f.pixel(t, y, x) == s.pixel(t, y, 15 - x));
                CHECK(f.mask(t, y, x, 1) == s.mask(t, y, 15 - x, 1));
            }

    const VideoSample r = augment_sample(s, {true, 0.5, 30.0, 0.1}, CounterRng(2));
    CHECK_NOTHROW(validate_sample(r));
    CHECK(r.labeled_frames == s.labeled_frames);
}

TEST_CASE("load_samples checks files against the manifest")
{
    ScratchDir dir("load");
    const VideoSample s = generate_sample(default_view_specs()[0], 4, {4, 16, 16, 2}, "a", "toy");
    write_sample(s, dir / "a.evs");
    DatasetManifest m;
    m.classes = default_class_names();
    m.views = {"A2C", "A4C", "PSAX"};
    m.samples = {{"a", "a.evs", 0, "toy", Split::train, 4}};
    CHECK(load_samples(m, dir.path(), Split::train).size() == 1);
    CHECK(load_samples(m, dir.path(), Split::test).empty());
    m.samples[0].view = 1;
    CHECK_THROWS_AS(load_samples(m, dir.path(), std::nullopt), InvalidArgument);
    m.samples[0].path = "missing.evs";
    CHECK_THROWS_AS(load_samples(m, dir.path(), std::nullopt), IoError);
}
