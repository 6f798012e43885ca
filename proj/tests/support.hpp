#pragma once

// Shared fixtures for the unit tests and the acceptance runner.

#include "echoprompt/autograd.hpp"
#include "echoprompt/model.hpp"
#include "echoprompt/rng.hpp"
#include "echoprompt/synthetic_data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

namespace echoprompt::testing {

/// T=2, H=W=8, D=8, N=2 and three views with one prompt each (M=3).
inline ModelConfig tiny_model_config(std::uint64_t seed = 11)
{
    ModelConfig c;
    c.backbone.depth = 2;
    c.backbone.base_channels = 4;
    c.backbone.embed_dim = 8;
    c.backbone.decoder_channels = 4;
    c.prompts_per_view = 1;
    c.prompt_length = 2;
    c.head_width = 4;
    c.patch_size = 4;
    c.top_n = 1;
    c.seed = seed;
    return c;
}

/// Random pixels and random masks on `labeled` frames; zero masks elsewhere.
inline VideoSample random_sample(CounterRng rng, std::uint32_t frames, std::uint32_t height, std::uint32_t width,
                                 std::uint32_t classes, std::uint32_t view, std::vector<std::uint32_t> labeled)
{
    VideoSample s;
    s.frames = frames;
    s.height = height;
    s.width = width;
    s.classes = classes;
    s.view_id = view;
    s.labeled_frames = std::move(labeled);
    s.sample_id = "r" + std::to_string(rng.key() % 100000);
    s.dataset_id = "random";
    s.pixels.resize(std::size_t{frames} * height * width);
    for (float& p : s.pixels) {
        p = static_cast<float>(rng.uniform());
    }
    s.masks.assign(s.pixels.size() * classes, 0);
    for (std::uint32_t t : s.labeled_frames) {
        const std::size_t begin = std::size_t{t} * height * width * classes;
        for (std::size_t i = 0; i < std::size_t{height} * width * classes; ++i) {
            s.masks[begin + i] = rng.uniform() < 0.4 ? 1 : 0;
        }
    }
    return s;
}

/// Small Gaussian offsets on every trainable tensor so no ReLU sits exactly
/// on its kink (zero-initialised biases put many there).
inline void jitter_parameters(EchoPromptModel& model, CounterRng rng, double stddev)
{
    for (auto& p : model.parameters()) {
        for (double& v : p.var.mutable_value().storage()) {
            v += rng.normal(0.0, stddev);
        }
    }
}

/// Two-per-view toy clips at 8x64x64, N=2.
inline std::vector<VideoSample> toy_samples(std::uint64_t seed, std::size_t per_view, VideoDims dims = {})
{
    std::vector<VideoSample> out;
    const CounterRng root(seed);
    for (const ViewSpec& spec : default_view_specs()) {
        for (std::size_t i = 0; i < per_view; ++i) {
            const std::uint64_t s = root.split(spec.name).split(i).key();
            out.push_back(generate_sample(spec, s, dims, spec.name + "_" + std::to_string(i), "synthetic"));
        }
    }
    return out;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string read_text(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream(path, std::ios::binary) << text;
}

/// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
public:
    explicit ScratchDir(const std::string& tag)
    {
        path_ = std::filesystem::temp_directory_path() /
                ("echoprompt_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~ScratchDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    ScratchDir(const ScratchDir&) = delete;
    ScratchDir& operator=(const ScratchDir&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// sum(x * w) for a fixed weight tensor, as a scalar graph node.
inline ag::Var weighted_total(const ag::Var& x, const Tensor& w)
{
    const std::size_t n = x.value().size();
    const ag::Var flat = ag::reshape(x, {1, n});
    const ag::Var dot = ag::matmul(flat, ag::Var::constant(w.reshaped({n, 1})));
    return ag::reshape(dot, {});
}

inline Tensor random_tensor(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0)
{
    Tensor t(std::move(shape));
    for (double& v : t.storage()) {
        v = rng.uniform(lo, hi);
    }
    return t;
}

/// |a - b| relative to the larger magnitude, with an absolute floor for
/// entries that are both essentially zero.
inline double relative_error(double a, double b, double floor = 1e-8)
{
    const double scale = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / scale;
}

} // namespace echoprompt::testing
