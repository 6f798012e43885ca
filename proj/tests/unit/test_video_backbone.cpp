#include "doctest.h"

#include "support.hpp"

#include "echoprompt/error.hpp"
#include "echoprompt/video_backbone.hpp"

using namespace echoprompt;
using namespace echoprompt::testing;

TEST_CASE("toy config shapes")
{
    const VideoBackbone net(BackboneConfig{}, 2, CounterRng(1));
    CounterRng rng(2);
    const ag::Var video = ag::Var::constant(random_tensor({8, 64, 64, 1}, rng, 0, 1));
    const FeaturePyramid p = net.encode(video);
    REQUIRE(p.levels.size() == 4);
    CHECK(p.bottleneck().shape() == Shape{8, 8, 8, 64});
    for (std::size_t i = 0; i + 1 < p.levels.size(); ++i) {
        CHECK(p.levels[i + 1].shape()[1] * 2 == p.levels[i].shape()[1]);
        CHECK(p.levels[i + 1].shape()[2] * 2 == p.levels[i].shape()[2]);
        CHECK(p.levels[i].value().all_finite());
    }
    CHECK(net.fused_channels() == 66);
    const ag::Var fused = ag::Var::constant(random_tensor({8, 8, 8, 66}, rng));
    const ag::Var out = net.decode(p, fused);
    CHECK(out.shape() == Shape{8, 64, 64, 8});
    CHECK(out.value().all_finite());
}

TEST_CASE("zero input and zero score channels stay finite")
{
    const VideoBackbone net(BackboneConfig{}, 2, CounterRng(3));
    const FeaturePyramid p = net.encode(ag::Var::constant(Tensor({8, 64, 64, 1})));
    CHECK(p.bottleneck().value().all_finite());
    const ag::Var zeros = ag::Var::constant(Tensor({8, 8, 8, 2}));
    const ag::Var parts[] = {p.bottleneck(), zeros};
    const ag::Var out = net.decode(p, ag::concat_channels(parts));
    CHECK(out.value().all_finite());
}

TEST_CASE("full-size 16x224x224 clip is accepted by the same code path")
{
    const VideoBackbone net(BackboneConfig{}, 2, CounterRng(4));
    CHECK_NOTHROW(net.check_input({16, 224, 224, 1}));
    const FeaturePyramid p = net.encode(ag::Var::constant(Tensor({16, 224, 224, 1}, 0.5)));
    CHECK(p.bottleneck().shape() == Shape{16, 28, 28, 64});
}

TEST_CASE("non-divisible dims are rejected with a padding hint")
{
    const VideoBackbone net(BackboneConfig{}, 2, CounterRng(5));
    try {
        net.check_input({8, 60, 64, 1});
        FAIL("expected rejection");
    } catch (const InvalidArgument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("pad 60x64 to 64x64") != std::string::npos);
    }
    CHECK_THROWS_AS(net.check_input({8, 64, 64, 3}), InvalidArgument);
    CHECK_THROWS_AS(net.check_input({64, 64, 1}), InvalidArgument);
}

TEST_CASE("decode rejects a channel mismatch")
{
    const VideoBackbone net(BackboneConfig{}, 2, CounterRng(6));
    const FeaturePyramid p = net.encode(ag::Var::constant(Tensor({2, 16, 16, 1}, 0.3)));
    CHECK_THROWS_AS(net.decode(p, ag::Var::constant(Tensor({2, 2, 2, 64}))), InvalidArgument);
}

TEST_CASE("shape contract over random valid sizes")
{
    CounterRng rng(7);
    BackboneConfig config;
    config.base_channels = 4;
    config.embed_dim = 8;
    config.decoder_channels = 4;
    for (int trial = 0; trial < 12; ++trial) {
        config.depth = 1 + rng.below(3);
        const std::size_t unit = std::size_t{1} << config.depth;
        const std::size_t T = 1 + rng.below(4), H = unit * (1 + rng.below(3)), W = unit * (1 + rng.below(3));
        const VideoBackbone net(config, 3, rng.split(trial));
        const FeaturePyramid p = net.encode(ag::Var::constant(random_tensor({T, H, W, 1}, rng, 0, 1)));
        CHECK(p.bottleneck().shape() == Shape{T, H / unit, W / unit, 8});
        const ag::Var fused = ag::Var::constant(random_tensor({T, H / unit, W / unit, 11}, rng));
        const ag::Var out = net.decode(p, fused);
        CHECK(out.shape() == Shape{T, H, W, 4});
        CHECK(out.value().all_finite());
    }
}

TEST_CASE("global embedding is the spatio-temporal mean")
{
    FeaturePyramid p;
    p.levels.push_back(ag::Var::constant(Tensor({2, 2, 2, 3}, 0.7)));
    Tensor g = global_embedding(p).value();
    for (double v : g.storage()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));

    Tensor one({2, 4, 4, 3});
    one[(1 * 16 + 5) * 3 + 2] = 6.4;
    p.levels.back() = ag::Var::constant(one);
    g = global_embedding(p).value();
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);
    CHECK(std::abs(g[2] - 6.4 / 32) < 1e-15);

    CounterRng rng(8);
    const Tensor r = random_tensor({3, 4, 2, 5}, rng);
    p.levels.back() = ag::Var::constant(r);
    g = global_embedding(p).value();
    for (std::size_t c = 0; c < 5; ++c) {
        double sum = 0.0;
        for (std::size_t i = 0; i < 24; ++i) sum += r[i * 5 + c];
        CHECK(std::abs(g[c] - sum / 24) < 1e-6);
    }
}
