// Acceptance runner: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset; the exit code is nonzero if any run fails.

#include "support.hpp"

#include "echoprompt/checkpoint.hpp"
#include "echoprompt/cli.hpp"
#include "echoprompt/evaluation.hpp"
#include "echoprompt/pixel_text_alignment.hpp"
#include "echoprompt/prompt_pool.hpp"
#include "echoprompt/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

using namespace echoprompt;
using namespace echoprompt::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

int call_cli(const std::vector<std::string>& args, std::string* err_out = nullptr)
{
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    if (err_out) *err_out = err.str();
    if (code != 0) std::cerr << "  cli failed: " << err.str();
    return code;
}

std::vector<VideoSample> overfit_samples()
{
    std::vector<VideoSample> out;
    const CounterRng root(42);
    for (const ViewSpec& spec : default_view_specs()) {
        for (std::uint64_t i = 0; i < 2; ++i) {
            out.push_back(generate_sample(spec, root.split(spec.view_id).split(i).key(), VideoDims{},
                                          spec.name + std::to_string(i), "synthetic"));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// 1. schedule exactness

Outcome schedule_exactness()
{
    const std::size_t t_max = 500;
    const double e0 = std::abs(lambda_schedule(0, t_max) - std::exp(-5.0));
    const double e1 = std::abs(lambda_schedule(t_max / 2, t_max) - std::exp(-1.25));
    const double e2 = std::abs(lambda_schedule(t_max, t_max) - 1.0);
    bool monotone = true;
    double worst_closed = 0.0;
    for (std::size_t t = 0; t <= t_max; ++t) {
        const double r = 1.0 - double(t) / double(t_max);
        worst_closed = std::max(worst_closed, std::abs(lambda_schedule(t, t_max) - std::exp(-5.0 * r * r)));
        if (t < t_max) monotone &= lambda_schedule(t + 1, t_max) >= lambda_schedule(t, t_max);
    }
    const double worst = std::max({e0, e1, e2, worst_closed});
    return {worst <= 1e-12 && monotone, fmt("max |lambda - closed form| = %.2e, monotone %s", worst, monotone ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 2. gradient fidelity

Outcome gradient_fidelity()
{
    TrainConfig config;
    config.model = tiny_model_config(11);
    config.steps = 10;
    EchoPromptModel model(config.model);
    jitter_parameters(model, CounterRng(1234), 0.05);
    const std::vector<VideoSample> batch = {random_sample(CounterRng(1), 2, 8, 8, 2, 0, {0}),
                                            random_sample(CounterRng(2), 2, 8, 8, 2, 2, {1})};
    const std::size_t t = config.steps / 2;

    for (auto& p : model.parameters()) p.var.zero_grad();
    ag::backward(total_loss(model, batch, t, config).total);

    const double h = 1e-5;
    const std::size_t per_group = 200;
    CounterRng pick(99);
    std::string detail;
    bool pass = true;
    for (const auto& [group, params] : model.parameter_groups()) {
        // Flatten the group into (param, index) coordinates.
        std::vector<std::pair<std::size_t, std::size_t>> coords;
        for (std::size_t p = 0; p < params.size(); ++p)
            for (std::size_t i = 0; i < params[p].var.value().size(); ++i) coords.emplace_back(p, i);
        const std::size_t total = coords.size();
        for (std::size_t i = 0; i < std::min(per_group, total); ++i) {
            std::swap(coords[i], coords[i + pick.below(total - i)]);
        }
        coords.resize(std::min(per_group, total));

        double worst = 0.0;
        for (const auto& [p, i] : coords) {
            ag::Var v = params[p].var;
            const double analytic = v.grad()[i];
            double& x = v.mutable_value()[i];
            const double keep = x;
            x = keep + h;
            const double up = total_loss(model, batch, t, config).report.l_total;
            x = keep - h;
            const double down = total_loss(model, batch, t, config).report.l_total;
            x = keep;
            worst = std::max(worst, relative_error(analytic, (up - down) / (2 * h), 1e-7));
        }
        pass &= worst <= 1e-3;
        detail += fmt("%s %zu/%zu coords max rel err %.1e; ", group.c_str(), coords.size(), total, worst);
    }
    return {pass, detail};
}

// ---------------------------------------------------------------------------
// 3. masking exactness

Outcome masking_exactness()
{
    std::size_t checked = 0, nonzero = 0, labeled_nonzero = 0;
    for (std::uint64_t b = 0; b < 20; ++b) {
        CounterRng rng = CounterRng(500).split(b);
        TrainConfig config;
        config.model = tiny_model_config(rng.next_u64());
        config.steps = 10;
        EchoPromptModel model(config.model);
        jitter_parameters(model, rng.split("jitter"), 0.05);
        std::vector<VideoSample> batch;
        const std::size_t n = 1 + rng.below(3);
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint32_t frames = 2 + 2 * static_cast<std::uint32_t>(rng.below(2));
            std::vector<std::uint32_t> labeled;
            for (std::uint32_t t = 0; t < frames; ++t)
                if (rng.uniform() < 0.5) labeled.push_back(t);
            if (labeled.empty()) labeled.push_back(0);
            if (labeled.size() == frames) labeled.pop_back();
            batch.push_back(random_sample(rng.split(i), frames, 8, 8, 2, static_cast<std::uint32_t>(rng.below(3)),
                                          labeled));
        }
        BatchLoss loss = total_loss(model, batch, rng.below(11), config);
        ag::backward(loss.total);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const Tensor g = loss.forwards[i].logits.grad();
            const std::size_t per_frame = g.size() / batch[i].frames;
            for (std::size_t t = 0; t < batch[i].frames; ++t) {
                for (std::size_t k = 0; k < per_frame; ++k) {
                    const double v = g[t * per_frame + k];
                    if (batch[i].is_labeled(t)) {
                        labeled_nonzero += v != 0.0;
                    } else {
                        ++checked;
                        nonzero += v != 0.0;
                    }
                }
            }
        }
    }
    return {nonzero == 0 && checked > 0 && labeled_nonzero > 0,
            fmt("%zu unlabeled-frame logit gradients, %zu nonzero; %zu nonzero on labeled frames", checked, nonzero,
                labeled_nonzero)};
}

// ---------------------------------------------------------------------------
// 4. score-map properties

Outcome score_map_properties()
{
    CounterRng rng(4040);
    double worst_oracle = 0.0, worst_scale = 0.0;
    bool in_range = true;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 2 + rng.below(15), n = 1 + rng.below(4);
        const std::size_t T = 1 + rng.below(3), H = 1 + rng.below(4), W = 1 + rng.below(4);
        TextEmbeddingMatrix text;
        text.rows = random_tensor({n + 1, d}, rng);
        for (std::size_t r = 0; r <= n; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += text.rows[r * d + j] * text.rows[r * d + j];
            for (std::size_t j = 0; j < d; ++j) text.rows[r * d + j] /= std::sqrt(s);
            text.class_names.push_back(r == n ? std::string(kBackgroundClass) : "c" + std::to_string(r));
        }
        text.normalized = true;
        const Tensor g = random_tensor({T, H, W, d}, rng, -3, 3);
        Tensor scaled = g;
        const double alpha = std::exp(rng.uniform(-5, 5));
        for (double& v : scaled.storage()) v *= alpha;
        const Tensor s = score_map(ag::Var::constant(g), text).value();
        const Tensor s2 = score_map(ag::Var::constant(scaled), text).value();
        for (std::size_t p = 0; p < T * H * W; ++p)
            for (std::size_t c = 0; c <= n; ++c) {
                double dot = 0, gg = 0, ff = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    dot += g[p * d + j] * text.rows[c * d + j];
                    gg += g[p * d + j] * g[p * d + j];
                    ff += text.rows[c * d + j] * text.rows[c * d + j];
                }
                const double v = s[p * (n + 1) + c];
                in_range &= v >= -1.0 && v <= 1.0;
                worst_oracle = std::max(worst_oracle, std::abs(v - dot / std::sqrt(gg * ff)));
                worst_scale = std::max(worst_scale, std::abs(v - s2[p * (n + 1) + c]));
            }
    }
    return {in_range && worst_oracle <= 1e-6 && worst_scale <= 1e-6,
            fmt("100 instances: range ok %s, max oracle err %.1e, max scale err %.1e", in_range ? "yes" : "no",
                worst_oracle, worst_scale)};
}

// ---------------------------------------------------------------------------
// 5. pool structure

Outcome pool_structure()
{
    const ModelConfig config;
    EchoPromptModel model(config);
    const PromptPool& pool = model.pool();
    bool pass = pool.size() == 9 && config.view_names.size() == 3 && config.prompts_per_view == 3;

    CounterRng rng(5050);
    std::size_t match_bad = 0, vote_bad = 0;
    const std::size_t d = pool.embed_dim();
    for (int trial = 0; trial < 1000; ++trial) {
        // Occasional duplicate keys exercise the tie rule.
        Tensor keys = random_tensor({9, d}, rng);
        if (trial % 10 == 0) {
            std::copy(keys.data(), keys.data() + d, keys.data() + 4 * d);
        }
        std::vector<double> q(d);
        for (double& v : q) v = rng.uniform(-1, 1);
        const std::size_t top_n = 1 + rng.below(9);

        std::vector<double> cos(9);
        for (std::size_t m = 0; m < 9; ++m) {
            double dot = 0, kk = 0, qq = 0;
            for (std::size_t j = 0; j < d; ++j) {
                dot += q[j] * keys[m * d + j];
                kk += keys[m * d + j] * keys[m * d + j];
                qq += q[j] * q[j];
            }
            cos[m] = dot / std::sqrt(kk * qq);
        }
        std::vector<std::size_t> order(9);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return cos[a] > cos[b]; });
        order.resize(top_n);
        const auto got = match(q, keys, top_n);
        match_bad += got != order;

        std::array<std::size_t, 3> votes{};
        for (auto m : order) ++votes[m / 3];
        const auto expected = static_cast<std::uint32_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
        vote_bad += vote_view(got, pool) != expected;
    }
    pass &= match_bad == 0 && vote_bad == 0;

    // Frozen tensors survive a short training run bit for bit.
    const Tensor text = model.text().rows;
    const Tensor proj = model.query_encoder().projection();
    const Tensor bias = model.query_encoder().bias();
    const Tensor keys_before = model.pool().keys().value();
    TrainConfig tc;
    tc.model = config;
    tc.steps = 3;
    tc.learning_rate = 1e-3;
    const auto samples = overfit_samples();
    const TrainResult r = train(model, tc, samples);
    const bool frozen = model.text().rows == text && model.query_encoder().projection() == proj &&
                        model.query_encoder().bias() == bias;
    const bool keys_moved = !(model.pool().keys().value() == keys_before);
    pass &= frozen && keys_moved && !r.aborted;
    return {pass, fmt("M = %zu; match mismatches %zu/1000, vote mismatches %zu/1000; frozen bit-identical %s "
                      "(trainable keys moved %s)",
                      pool.size(), match_bad, vote_bad, frozen ? "yes" : "no", keys_moved ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 6. overfit capability

Outcome overfit_capability()
{
    const auto samples = overfit_samples();
    TrainConfig config;
    config.model.seed = 5;
    config.seed = 3;
    config.learning_rate = 1e-3;
    config.steps = 300;
    EchoPromptModel model(config.model);
    const TrainResult r = train(model, config, samples);
    const double matched = mean_labeled_dice(model, samples, false);
    const double given = mean_labeled_dice(model, samples, true);

    const std::size_t decile = std::max<std::size_t>(1, r.history.size() / 10);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < decile; ++i) {
        first += r.history[i].l_bce / decile;
        last += r.history[r.history.size() - 1 - i].l_bce / decile;
    }
    return {!r.aborted && r.history.size() <= 500 && matched >= 0.90 && first > last,
            fmt("%zu steps, train Dice %.4f (retrieved view) / %.4f (given view); l_bce first decile %.4f -> last "
                "decile %.4f",
                r.history.size(), matched, given, first, last)};
}

// ---------------------------------------------------------------------------
// 7. view retrieval analog

Outcome view_retrieval()
{
    const auto specs = default_view_specs();
    const DatasetManifest manifest = build_manifest(specs, {40, 40, 40}, 0.75, 77, default_class_names());
    std::vector<VideoSample> train_set, test_set;
    for (const ManifestEntry& e : manifest.samples) {
        VideoSample s = generate_sample(specs[e.view], e.seed, VideoDims{}, e.id, e.dataset);
        (e.split == Split::train ? train_set : test_set).push_back(std::move(s));
    }
    TrainConfig config;
    config.model.seed = 7;
    config.seed = 8;
    config.learning_rate = 1e-3;
    config.steps = 150;
    EchoPromptModel model(config.model);
    const TrainResult r = train(model, config, train_set);

    const auto annulus = [&](std::uint32_t v) { return specs[v].geometry == GeometryFamily::annulus; };
    std::size_t coarse_ok = 0, blob_total = 0, blob_ok = 0;
    std::vector<std::vector<std::size_t>> confusion(3, std::vector<std::size_t>(3, 0));
    for (const VideoSample& s : test_set) {
        const auto keys = match(model.query(s), model.pool(), model.config().top_n);
        const std::uint32_t v = vote_view(keys, model.pool());
        ++confusion[s.view_id][v];
        coarse_ok += annulus(v) == annulus(s.view_id);
        if (!annulus(s.view_id) && !annulus(v)) {
            ++blob_total;
            blob_ok += v == s.view_id;
        }
    }
    const double coarse = double(coarse_ok) / double(test_set.size());
    std::string table;
    for (const auto& row : confusion) table += fmt("[%zu %zu %zu]", row[0], row[1], row[2]);
    return {!r.aborted && test_set.size() == 30 && coarse >= 0.85,
            fmt("%zu train / %zu held out; annulus-vs-blob accuracy %.3f; blob-vs-blob accuracy %.3f (%zu/%zu, "
                "reported only); confusion %s",
                train_set.size(), test_set.size(), coarse, blob_total ? double(blob_ok) / blob_total : 0.0, blob_ok,
                blob_total, table.c_str())};
}

// ---------------------------------------------------------------------------
// 8. ablation wiring, all through the CLI on the shipped toy configs

Outcome ablation_wiring()
{
    ScratchDir dir("acceptance_ablation");
    const fs::path source = ECHOPROMPT_SOURCE_DIR;
    auto synth = nlohmann::json::parse(read_text(source / "configs/synth.json"));
    synth["count_per_view"] = 3;
    synth["split_fraction"] = 0.67;
    write_text(dir / "synth.json", synth.dump());
    auto train_cfg = nlohmann::json::parse(read_text(source / "configs/train.json"));
    train_cfg["steps"] = 3;
    write_text(dir / "train.json", train_cfg.dump());

    const std::string data = (dir / "data").string(), manifest = data + "/manifest.json";
    if (call_cli({"synth", "--config", (dir / "synth.json").string(), "--out", data}) != 0) {
        return {false, "synth failed"};
    }
    const std::string cache = (dir / "cache.json").string();
    if (call_cli({"text-cache", "--config", (dir / "train.json").string(), "--manifest", manifest, "--out", cache}) !=
        0) {
        return {false, "text-cache failed"};
    }
    struct Variant {
        std::string name;
        std::vector<std::string> train_flags, eval_flags;
    };
    const std::vector<Variant> variants = {
        {"hash", {"--text-provider", "hash"}, {}},
        {"onehot", {"--text-provider", "onehot"}, {}},
        {"cached", {"--text-provider", "cached", "--text-cache", cache}, {}},
        {"no-text-path", {"--no-text-path"}, {}},
        {"use-view-info", {}, {"--use-view-info"}},
    };
    std::string detail;
    bool pass = true;
    for (const Variant& v : variants) {
        const std::string ckpt = (dir / (v.name + ".ckpt")).string(), metrics = (dir / (v.name + ".json")).string();
        std::vector<std::string> t = {"train", "--config", (dir / "train.json").string(), "--manifest", manifest,
                                      "--out", ckpt};
        t.insert(t.end(), v.train_flags.begin(), v.train_flags.end());
        std::vector<std::string> e = {"eval", "--checkpoint", ckpt, "--manifest", manifest, "--out", metrics};
        e.insert(e.end(), v.eval_flags.begin(), v.eval_flags.end());
        bool ok = call_cli(t) == 0 && call_cli(e) == 0;
        if (ok) {
            const auto doc = nlohmann::json::parse(read_text(metrics));
            const auto errors = metrics_schema_errors(doc);
            ok = errors.empty();
            if (v.name == "use-view-info") ok &= doc["view_accuracy"] == 1.0;
            if (v.name == "no-text-path") ok &= load_checkpoint(ckpt).model->fused_channels() == 64;
            detail += fmt("%s %s (mean_dice %.3f); ", v.name.c_str(), ok ? "ok" : "bad",
                          doc.value("mean_dice", -1.0));
        } else {
            detail += v.name + " failed; ";
        }
        pass &= ok;
    }
    return {pass, detail};
}

// ---------------------------------------------------------------------------
// 9. determinism and round trips

Outcome determinism_round_trips()
{
    ScratchDir dir("acceptance_determinism");
    const fs::path source = ECHOPROMPT_SOURCE_DIR;
    auto synth = nlohmann::json::parse(read_text(source / "configs/synth.json"));
    synth["count_per_view"] = 3;
    write_text(dir / "synth.json", synth.dump());
    std::string detail;

    // Same-seed synthesis.
    bool synth_same = true;
    for (const char* out : {"a", "b"}) {
        synth_same &= call_cli({"synth", "--config", (dir / "synth.json").string(), "--out", (dir / out).string()}) == 0;
    }
    const DatasetManifest manifest = load_manifest(dir / "a/manifest.json");
    synth_same &= read_bytes(dir / "a/manifest.json") == read_bytes(dir / "b/manifest.json");
    bool evs_exact = true;
    std::vector<VideoSample> samples;
    for (const ManifestEntry& e : manifest.samples) {
        const auto bytes = read_bytes(dir / "a" / e.path);
        synth_same &= bytes == read_bytes(dir / "b" / e.path);
        const VideoSample s = decode_sample(bytes);
        evs_exact &= encode_sample(s) == bytes && s == generate_sample(default_view_specs()[e.view], e.seed,
                                                                       VideoDims{}, e.id, e.dataset);
        samples.push_back(s);
    }
    detail += fmt("synthesis byte-identical %s; .evs round trip exact %s; ", synth_same ? "yes" : "no",
                  evs_exact ? "yes" : "no");

    // Checkpoint after a short training run.
    TrainConfig config;
    config.steps = 2;
    config.learning_rate = 1e-3;
    EchoPromptModel model(config.model);
    train(model, config, std::span(samples).first(4));
    const auto bytes = encode_checkpoint(model, config);
    save_checkpoint(model, config, dir / "m.ckpt");
    const Checkpoint back = load_checkpoint(dir / "m.ckpt");
    bool ckpt_exact = read_bytes(dir / "m.ckpt") == bytes && encode_checkpoint(*back.model, back.config) == bytes;
    for (std::size_t i = 0; i < 3; ++i) {
        ckpt_exact &= back.model->predict(samples[i]).probabilities == model.predict(samples[i]).probabilities;
    }
    detail += fmt("checkpoint round trip exact %s; ", ckpt_exact ? "yes" : "no");

    // Plot emission twice from the same CSV.
    const std::string csv = (dir / "emb.csv").string();
    bool plot_same = call_cli({"export-embeddings", "--checkpoint", (dir / "m.ckpt").string(), "--manifest",
                               (dir / "a/manifest.json").string(), "--out", csv, "--split", "all"}) == 0;
    plot_same &= call_cli({"plot", "--csv", csv, "--out", (dir / "p1.svg").string()}) == 0;
    plot_same &= call_cli({"plot", "--csv", csv, "--out", (dir / "p2.svg").string()}) == 0;
    plot_same &= read_bytes(dir / "p1.svg") == read_bytes(dir / "p2.svg") && !read_bytes(dir / "p1.svg").empty();
    detail += fmt("plot byte-identical %s", plot_same ? "yes" : "no");
    return {synth_same && evs_exact && ckpt_exact && plot_same, detail};
}

struct Criterion {
    int id;
    const char* name;
    double limit_seconds;  // 0 = no runtime bound
    std::function<Outcome()> run;
};

} // namespace

int main(int argc, char** argv)
{
    const std::vector<Criterion> criteria = {
        {1, "schedule exactness", 1.0, schedule_exactness},
        {2, "gradient fidelity", 120.0, gradient_fidelity},
        {3, "masking exactness", 0.0, masking_exactness},
        {4, "score-map properties", 0.0, score_map_properties},
        {5, "pool structure", 0.0, pool_structure},
        {6, "overfit capability", 600.0, overfit_capability},
        {7, "view retrieval analog", 1800.0, view_retrieval},
        {8, "ablation wiring", 0.0, ablation_wiring},
        {9, "determinism and round trips", 0.0, determinism_round_trips},
    };
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

    int failures = 0;
    for (const Criterion& c : criteria) {
        if (!wanted.empty() && !wanted.contains(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = c.limit_seconds == 0.0 || secs <= c.limit_seconds;
        const bool pass = o.pass && in_time;
        failures += !pass;
        std::cout << (pass ? "PASS" : "FAIL") << " " << c.id << " " << c.name << ": " << o.detail
                  << fmt(" [%.2f s", secs) << (c.limit_seconds > 0 ? fmt(", limit %.0f s]", c.limit_seconds) : "]")
                  << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
