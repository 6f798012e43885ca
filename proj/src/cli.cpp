#include "echoprompt/cli.hpp"

#include "echoprompt/checkpoint.hpp"
#include "echoprompt/error.hpp"
#include "echoprompt/evaluation.hpp"
#include "echoprompt/projection.hpp"
#include "echoprompt/training.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iterator>
#include <set>

namespace echoprompt {

namespace fs = std::filesystem;

namespace {

nlohmann::json read_json_file(const fs::path& path, const char* what)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(std::string("cannot open ") + what + " " + path.string());
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument(std::string(what) + " " + path.string() + " is not valid JSON: " + e.what());
    }
}

std::string read_text_file(const fs::path& path, const char* what)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(std::string("cannot open ") + what + " " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text_file(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

template <class T>
T field(const nlohmann::json& doc, const char* key, T fallback, const std::string& where)
{
    if (!doc.contains(key)) {
        return fallback;
    }
    try {
        return doc.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw InvalidArgument(where + key + ": wrong type");
    }
}

fs::path manifest_dir(const fs::path& manifest)
{
    return manifest.has_parent_path() ? manifest.parent_path() : fs::path(".");
}

std::optional<Split> parse_split_option(const std::string& s)
{
    if (s == "all") {
        return std::nullopt;
    }
    return parse_split(s);
}

struct Options {
    std::string config, manifest, out, checkpoint, csv, history, split = "test", query_table;
    std::string text_provider, text_cache;
    bool no_text_path = false;
    bool use_view_info = false;
    std::optional<std::size_t> steps, batch_size, log_every;
    std::optional<double> learning_rate;
    std::optional<std::uint64_t> seed;
};

void check_manifest_matches(const EchoPromptModel& model, const DatasetManifest& manifest)
{
    if (manifest.classes != model.config().class_names) {
        throw InvalidArgument("manifest classes do not match the checkpoint classes");
    }
    if (manifest.views != model.config().view_names) {
        throw InvalidArgument("manifest views do not match the checkpoint views");
    }
}

void attach_query_table(EchoPromptModel& model, const Options& o)
{
    if (!o.query_table.empty()) {
        model.set_query_source(
            std::make_shared<PrecomputedQueryEncoder>(PrecomputedQueryEncoder::from_file(o.query_table)));
    }
}

int cmd_synth(const Options& o, std::ostream& out)
{
    const SynthConfig config = synth_config_from_json(read_json_file(o.config, "synth config"));
    const DatasetManifest manifest = synthesize_dataset(config, o.out);
    out << "wrote " << manifest.samples.size() << " samples and manifest.json to " << o.out << "\n";
    return 0;
}

int cmd_train(const Options& o, std::ostream& out)
{
    TrainConfig config;
    if (!o.config.empty()) {
        config = train_config_from_json(read_json_file(o.config, "train config"));
    }
    if (!o.text_provider.empty()) config.model.text_provider = parse_text_provider(o.text_provider);
    if (!o.text_cache.empty()) config.model.text_cache = o.text_cache;
    if (o.no_text_path) config.model.use_text_path = false;
    if (o.use_view_info) config.use_view_info = true;
    if (o.steps) config.steps = *o.steps;
    if (o.batch_size) config.batch_size = *o.batch_size;
    if (o.learning_rate) config.learning_rate = *o.learning_rate;
    if (o.seed) config.seed = *o.seed;
    validate_train_config(config);

    const DatasetManifest manifest = load_manifest(o.manifest);
    config.model.class_names = manifest.classes;
    config.model.view_names = manifest.views;
    const std::vector<VideoSample> samples = load_samples(manifest, manifest_dir(o.manifest), Split::train);

    EchoPromptModel model(config.model);
    const std::size_t every = o.log_every.value_or(0);
    const TrainResult result = train(model, config, samples, [&](const LossReport& r) {
        if (every > 0 && (r.step % every == 0 || r.step + 1 == r.t_max)) {
            out << "step " << r.step << " l_total " << r.l_total << " l_bce " << r.l_bce << " l_pixel_text "
                << r.l_pixel_text << " l_pr " << r.l_pr << " lambda " << r.lambda_t << "\n";
        }
    });
    save_checkpoint(model, config, o.out);
    if (!o.history.empty()) {
        nlohmann::ordered_json h = nlohmann::ordered_json::array();
        for (const LossReport& r : result.history) {
            h.push_back(loss_report_to_json(r));
        }
        write_text_file(o.history, h.dump(1) + "\n");
    }
    if (result.aborted) {
        throw NumericError("training aborted: " + result.abort_reason + " (last good parameters saved to " + o.out + ")");
    }
    out << "trained " << result.history.size() << " steps on " << samples.size() << " samples; checkpoint "
        << o.out << "\n";
    return 0;
}

int cmd_eval(const Options& o, std::ostream& out)
{
    Checkpoint ckpt = load_checkpoint(o.checkpoint);
    attach_query_table(*ckpt.model, o);
    const DatasetManifest manifest = load_manifest(o.manifest);
    check_manifest_matches(*ckpt.model, manifest);
    const auto split = parse_split_option(o.split);
    const std::vector<VideoSample> samples = load_samples(manifest, manifest_dir(o.manifest), split);
    if (samples.empty()) {
        throw InvalidArgument("split: '" + o.split + "' has no samples");
    }
    const bool view_info = o.use_view_info || ckpt.config.use_view_info;
    MetricsDocument metrics = evaluate(*ckpt.model, samples, view_info);
    metrics.config = train_config_to_json(ckpt.config);
    metrics.config["use_view_info"] = view_info;
    metrics.config["split"] = o.split;
    const auto doc = metrics_to_json(metrics);
    write_text_file(o.out, doc.dump(2) + "\n");
    out << "mean_dice " << metrics.mean_dice << " view_accuracy " << metrics.view_accuracy << " -> " << o.out << "\n";
    return 0;
}

int cmd_match(const Options& o, std::ostream& out)
{
    Checkpoint ckpt = load_checkpoint(o.checkpoint);
    attach_query_table(*ckpt.model, o);
    const DatasetManifest manifest = load_manifest(o.manifest);
    check_manifest_matches(*ckpt.model, manifest);
    const std::vector<VideoSample> samples =
        load_samples(manifest, manifest_dir(o.manifest), parse_split_option(o.split));
    const EchoPromptModel& model = *ckpt.model;
    nlohmann::ordered_json doc;
    doc["samples"] = nlohmann::ordered_json::array();
    std::size_t correct = 0;
    for (const VideoSample& s : samples) {
        const auto keys = match(model.query(s), model.pool(), model.config().top_n);
        const std::uint32_t voted = vote_view(keys, model.pool());
        correct += voted == s.view_id;
        doc["samples"].push_back({{"id", s.sample_id}, {"view", s.view_id}, {"matched", keys}, {"voted_view", voted}});
    }
    doc["view_accuracy"] = samples.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(samples.size());
    if (o.out.empty()) {
        out << doc.dump(2) << "\n";
    } else {
        write_text_file(o.out, doc.dump(2) + "\n");
        out << "matched " << samples.size() << " samples; view_accuracy " << doc["view_accuracy"].get<double>()
            << " -> " << o.out << "\n";
    }
    return 0;
}

int cmd_export(const Options& o, std::ostream& out)
{
    Checkpoint ckpt = load_checkpoint(o.checkpoint);
    attach_query_table(*ckpt.model, o);
    const DatasetManifest manifest = load_manifest(o.manifest);
    check_manifest_matches(*ckpt.model, manifest);
    const std::vector<VideoSample> samples =
        load_samples(manifest, manifest_dir(o.manifest), parse_split_option(o.split));
    const auto rows = embedding_rows(*ckpt.model, samples);
    write_text_file(o.out, embeddings_to_csv(rows));
    out << "wrote " << rows.size() << " rows to " << o.out << "\n";
    return 0;
}

int cmd_plot(const Options& o, std::ostream& out)
{
    const auto rows = embeddings_from_csv(read_text_file(o.csv, "embeddings csv"));
    const Projection2D p = pca2(rows);
    write_text_file(o.out, render_svg(rows, p));
    out << "plotted " << rows.size() << " rows to " << o.out << "\n";
    return 0;
}

int cmd_text_cache(const Options& o, std::ostream& out)
{
    ModelConfig model;
    if (!o.config.empty()) {
        model = train_config_from_json(read_json_file(o.config, "train config")).model;
    }
    if (!o.manifest.empty()) {
        model.class_names = load_manifest(o.manifest).classes;
    }
    const std::string kind = o.text_provider.empty() ? "hash" : o.text_provider;
    const std::uint64_t seed = CounterRng(o.seed.value_or(model.seed)).split("text").key();
    const std::size_t d = model.backbone.embed_dim;
    if (kind == "hash") {
        write_embedding_cache(HashTextProvider(d, seed), model.class_names, o.out);
    } else if (kind == "onehot") {
        write_embedding_cache(OneHotTextProvider(d, seed), model.class_names, o.out);
    } else {
        throw InvalidArgument("text-provider: text-cache can export hash or onehot, not '" + kind + "'");
    }
    out << "wrote " << model.class_names.size() + 1 << " prompt vectors to " << o.out << "\n";
    return 0;
}

std::string one_line(std::string s)
{
    for (char& c : s) {
        if (c == '\n' || c == '\r') {
            c = ' ';
        }
    }
    return s;
}

} // namespace

SynthConfig synth_config_from_json(const nlohmann::json& doc)
{
    if (!doc.is_object()) {
        throw InvalidArgument("synth config: expected a JSON object");
    }
    static const std::set<std::string> known = {"seed",    "frames", "height",         "width",
                                                "classes", "views",  "split_fraction", "count_per_view"};
    for (const auto& [key, _] : doc.items()) {
        if (!known.contains(key)) {
            throw InvalidArgument(key + ": unknown field");
        }
    }
    if (!doc.contains("views")) {
        throw InvalidArgument("views: missing required field");
    }
    SynthConfig c;
    c.seed = field<std::uint64_t>(doc, "seed", 0, "");
    c.dims.frames = field<std::uint32_t>(doc, "frames", c.dims.frames, "");
    c.dims.height = field<std::uint32_t>(doc, "height", c.dims.height, "");
    c.dims.width = field<std::uint32_t>(doc, "width", c.dims.width, "");
    c.classes = field(doc, "classes", c.classes, "");
    c.dims.classes = static_cast<std::uint32_t>(c.classes.size());
    c.split_fraction = field(doc, "split_fraction", c.split_fraction, "");
    const auto default_count = field<std::size_t>(doc, "count_per_view", 10, "");
    const auto& views = doc.at("views");
    if (!views.is_array() || views.empty()) {
        throw InvalidArgument("views: expected a non-empty array");
    }
    for (std::size_t i = 0; i < views.size(); ++i) {
        const auto& v = views[i];
        const std::string where = "views[" + std::to_string(i) + "].";
        if (!v.is_object()) {
            throw InvalidArgument(where.substr(0, where.size() - 1) + ": expected an object");
        }
        for (const char* required : {"name", "geometry", "sector"}) {
            if (!v.contains(required)) {
                throw InvalidArgument(where + required + ": missing required field");
            }
        }
        ViewSpec s;
        s.view_id = static_cast<std::uint32_t>(i);
        s.name = field<std::string>(v, "name", "", where);
        s.geometry = parse_geometry(field<std::string>(v, "geometry", "", where));
        s.sector = parse_sector(field<std::string>(v, "sector", "", where));
        s.noise_level = field(v, "noise_level", 0.15, where);
        s.intensity_bias = field(v, "intensity_bias", 0.0, where);
        s.deform_amplitude = field(v, "deform_amplitude", 0.3, where);
        c.views.push_back(std::move(s));
        c.counts.push_back(field(v, "count", default_count, where));
    }
    validate_view_specs(c.views);
    return c;
}

DatasetManifest synthesize_dataset(const SynthConfig& config, const fs::path& out_dir)
{
    const DatasetManifest manifest =
        build_manifest(config.views, config.counts, config.split_fraction, config.seed, config.classes);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) {
        throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    }
    for (const ManifestEntry& e : manifest.samples) {
        const VideoSample s = generate_sample(config.views[e.view], e.seed, config.dims, e.id, e.dataset);
        write_sample(s, out_dir / e.path);
    }
    save_manifest(manifest, out_dir / "manifest.json");
    return manifest;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Prompt-pool guided multi-view echo video segmentation"};
    app.name("echoprompt");
    app.require_subcommand(1);
    Options o;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic multi-view dataset");
    synth->add_option("--config", o.config, "Synthesis config JSON")->required();
    synth->add_option("--out", o.out, "Output directory")->required();

    auto* tr = app.add_subcommand("train", "Train a model on the train split");
    tr->add_option("--config", o.config, "Training config JSON");
    tr->add_option("--manifest", o.manifest, "Dataset manifest")->required();
    tr->add_option("--out", o.out, "Checkpoint path")->required();
    tr->add_option("--history", o.history, "Write per-step loss reports as JSON");
    tr->add_option("--steps", o.steps, "Optimizer steps (t_max)");
    tr->add_option("--batch-size", o.batch_size, "Samples per step");
    tr->add_option("--lr", o.learning_rate, "Learning rate");
    tr->add_option("--seed", o.seed, "Data-order seed");
    tr->add_option("--log-every", o.log_every, "Print a loss line every N steps");
    tr->add_option("--text-provider", o.text_provider, "hash, cached or onehot");
    tr->add_option("--text-cache", o.text_cache, "Embedding cache for the cached provider");
    tr->add_flag("--no-text-path", o.no_text_path, "Drop the score map and pixel-text loss");
    tr->add_flag("--use-view-info", o.use_view_info, "Evaluate with the true view by default");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and write metrics.json");
    ev->add_option("--checkpoint", o.checkpoint, "Checkpoint path")->required();
    ev->add_option("--manifest", o.manifest, "Dataset manifest")->required();
    ev->add_option("--out", o.out, "Metrics JSON path")->required();
    ev->add_option("--split", o.split, "train, test or all")->capture_default_str();
    ev->add_option("--query-table", o.query_table, "Precomputed query vectors JSON");
    ev->add_flag("--use-view-info", o.use_view_info, "Use the true view instead of retrieving it");

    auto* ma = app.add_subcommand("match", "Report matched keys and voted view per sample");
    ma->add_option("--checkpoint", o.checkpoint, "Checkpoint path")->required();
    ma->add_option("--manifest", o.manifest, "Dataset manifest")->required();
    ma->add_option("--out", o.out, "Output JSON (stdout when omitted)");
    ma->add_option("--split", o.split, "train, test or all")->capture_default_str();
    ma->add_option("--query-table", o.query_table, "Precomputed query vectors JSON");

    auto* ex = app.add_subcommand("export-embeddings", "Write pool keys and sample queries as CSV");
    ex->add_option("--checkpoint", o.checkpoint, "Checkpoint path")->required();
    ex->add_option("--manifest", o.manifest, "Dataset manifest")->required();
    ex->add_option("--out", o.out, "CSV path")->required();
    ex->add_option("--split", o.split, "train, test or all")->capture_default_str();
    ex->add_option("--query-table", o.query_table, "Precomputed query vectors JSON");

    auto* pl = app.add_subcommand("plot", "Project an embeddings CSV onto two principal components as SVG");
    pl->add_option("--csv", o.csv, "Embeddings CSV")->required();
    pl->add_option("--out", o.out, "SVG path")->required();

    auto* tc = app.add_subcommand("text-cache", "Write a text embedding cache file");
    tc->add_option("--config", o.config, "Training config JSON (model dims, seed)");
    tc->add_option("--manifest", o.manifest, "Take class names from a manifest");
    tc->add_option("--out", o.out, "Cache path")->required();
    tc->add_option("--text-provider", o.text_provider, "hash or onehot");
    tc->add_option("--seed", o.seed, "Model seed the provider derives from");

    std::vector<std::string> argv_storage;
    argv_storage.reserve(args.size() + 1);
    argv_storage.emplace_back("echoprompt");
    argv_storage.insert(argv_storage.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& a : argv_storage) {
        argv.push_back(a.c_str());
    }
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "echoprompt: usage error: " << one_line(e.what()) << "\n";
        return 2;
    }

    try {
        if (synth->parsed()) return cmd_synth(o, out);
        if (tr->parsed()) return cmd_train(o, out);
        if (ev->parsed()) return cmd_eval(o, out);
        if (ma->parsed()) return cmd_match(o, out);
        if (ex->parsed()) return cmd_export(o, out);
        if (pl->parsed()) return cmd_plot(o, out);
        if (tc->parsed()) return cmd_text_cache(o, out);
    } catch (const InvalidArgument& e) {
        err << "echoprompt: config error: " << one_line(e.what()) << "\n";
        return 2;
    } catch (const Error& e) {
        const char* kind = e.kind() == ErrorKind::io ? "io" : e.kind() == ErrorKind::parse ? "parse" : "numeric";
        err << "echoprompt: " << kind << " error: " << one_line(e.what()) << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "echoprompt: error: " << one_line(e.what()) << "\n";
        return 1;
    }
    return 2;
}

} // namespace echoprompt
