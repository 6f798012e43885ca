#include "echoprompt/training.hpp"

#include "echoprompt/error.hpp"

#include <cmath>
#include <iostream>
#include <numbers>
#include <numeric>
#include <set>

namespace echoprompt {

double lambda_schedule(std::size_t t, std::size_t t_max)
{
    if (t_max == 0) {
        throw InvalidArgument("lambda_schedule: t_max must be at least 1");
    }
    if (t > t_max) {
        std::cerr << "warning: lambda_schedule step " << t << " exceeds t_max " << t_max << "; clamping to 1\n";
        return 1.0;
    }
    const double r = 1.0 - static_cast<double>(t) / static_cast<double>(t_max);
    return std::exp(-5.0 * r * r);
}

ag::Var masked_bce(const ag::Var& logits, const VideoSample& sample, double clamp)
{
    const Shape expected{sample.frames, sample.height, sample.width, sample.classes};
    if (logits.shape() != expected) {
        throw InvalidArgument("masked_bce: logits " + shape_string(logits.shape()) + " do not match masks " +
                              shape_string(expected));
    }
    if (sample.labeled_frames.empty()) {
        std::cerr << "warning: sample '" << sample.sample_id << "' has no labeled frames; BCE is 0\n";
    }
    const std::vector<std::uint8_t> flags = sample.frame_flags();
    return ag::masked_bce_with_logits(logits, sample.masks, flags, clamp);
}

nlohmann::ordered_json loss_report_to_json(const LossReport& r)
{
    return {{"step", r.step},         {"t_max", r.t_max}, {"lambda_t", r.lambda_t},
            {"l_bce", r.l_bce},       {"l_pixel_text", r.l_pixel_text},
            {"l_pr", r.l_pr},         {"l_seg", r.l_seg}, {"l_total", r.l_total}};
}

nlohmann::ordered_json train_config_to_json(const TrainConfig& c)
{
    nlohmann::ordered_json j;
    j["model"] = model_config_to_json(c.model);
    j["lambda1"] = c.lambda1;
    j["lambda2"] = c.lambda2;
    j["learning_rate"] = c.learning_rate;
    j["adam_beta1"] = c.adam_beta1;
    j["adam_beta2"] = c.adam_beta2;
    j["adam_epsilon"] = c.adam_epsilon;
    j["batch_size"] = c.batch_size;
    j["steps"] = c.steps;
    j["seed"] = c.seed;
    j["temperature"] = c.pixel_text.temperature;
    j["pixel_text_loss"] = std::string(to_string(c.pixel_text.kind));
    j["value_selection"] = std::string(to_string(c.value_selection));
    j["reversed_ramp"] = c.reversed_ramp;
    j["bce_clamp"] = c.bce_clamp;
    j["divergence_threshold"] = c.divergence_threshold;
    j["use_view_info"] = c.use_view_info;
    j["augment"] = {{"enabled", c.augment.enabled},
                    {"flip_probability", c.augment.flip_probability},
                    {"max_rotation_deg", c.augment.max_rotation_deg},
                    {"max_shear", c.augment.max_shear}};
    return j;
}

namespace {

template <class T>
void read_field(const nlohmann::json& doc, const char* key, T& out, const std::string& where = {})
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

} // namespace

TrainConfig train_config_from_json(const nlohmann::json& doc)
{
    if (!doc.is_object()) {
        throw InvalidArgument("config: expected a JSON object");
    }
    static const std::set<std::string> known = {
        "model",     "lambda1",      "lambda2",      "learning_rate",   "adam_beta1",      "adam_beta2",
        "adam_epsilon", "batch_size", "steps",       "seed",            "temperature",     "pixel_text_loss",
        "value_selection", "reversed_ramp", "bce_clamp", "divergence_threshold", "use_view_info", "augment"};
    for (const auto& [key, _] : doc.items()) {
        if (!known.contains(key)) {
            throw InvalidArgument(key + ": unknown field");
        }
    }
    TrainConfig c;
    if (doc.contains("model")) {
        c.model = model_config_from_json(doc.at("model"));
    }
    read_field(doc, "lambda1", c.lambda1);
    read_field(doc, "lambda2", c.lambda2);
    read_field(doc, "learning_rate", c.learning_rate);
    read_field(doc, "adam_beta1", c.adam_beta1);
    read_field(doc, "adam_beta2", c.adam_beta2);
    read_field(doc, "adam_epsilon", c.adam_epsilon);
    read_field(doc, "batch_size", c.batch_size);
    read_field(doc, "steps", c.steps);
    read_field(doc, "seed", c.seed);
    read_field(doc, "temperature", c.pixel_text.temperature);
    std::string kind(to_string(c.pixel_text.kind));
    read_field(doc, "pixel_text_loss", kind);
    c.pixel_text.kind = parse_pixel_text_loss(kind);
    std::string selection(to_string(c.value_selection));
    read_field(doc, "value_selection", selection);
    c.value_selection = parse_prompt_selection(selection);
    read_field(doc, "reversed_ramp", c.reversed_ramp);
    read_field(doc, "bce_clamp", c.bce_clamp);
    read_field(doc, "divergence_threshold", c.divergence_threshold);
    read_field(doc, "use_view_info", c.use_view_info);
    if (doc.contains("augment")) {
        const auto& a = doc.at("augment");
        if (!a.is_object()) {
            throw InvalidArgument("augment: expected an object");
        }
        read_field(a, "enabled", c.augment.enabled, "augment.");
        read_field(a, "flip_probability", c.augment.flip_probability, "augment.");
        read_field(a, "max_rotation_deg", c.augment.max_rotation_deg, "augment.");
        read_field(a, "max_shear", c.augment.max_shear, "augment.");
    }
    validate_train_config(c);
    return c;
}

void validate_train_config(const TrainConfig& c)
{
    if (c.steps < 1) throw InvalidArgument("steps: must be at least 1");
    if (c.batch_size < 1) throw InvalidArgument("batch_size: must be at least 1");
    if (!(c.learning_rate > 0.0)) throw InvalidArgument("learning_rate: must be positive");
    if (!(c.pixel_text.temperature > 0.0)) throw InvalidArgument("temperature: must be positive");
    if (!(c.bce_clamp > 0.0)) throw InvalidArgument("bce_clamp: must be positive");
    if (!(c.lambda1 >= 0.0) || !(c.lambda2 >= 0.0)) throw InvalidArgument("lambda1/lambda2: must be non-negative");
    if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0)) throw InvalidArgument("adam_beta1: must lie in [0, 1)");
    if (!(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0)) throw InvalidArgument("adam_beta2: must lie in [0, 1)");
    if (c.augment.flip_probability < 0.0 || c.augment.flip_probability > 1.0) {
        throw InvalidArgument("augment.flip_probability: must lie in [0, 1]");
    }
}

double recompose_total(const LossReport& r, double lambda1, double lambda2, bool reversed_ramp)
{
    const double seg = lambda1 * r.l_pixel_text + lambda2 * r.l_bce;
    const double w_seg = reversed_ramp ? r.lambda_t : 1.0 - r.lambda_t;
    const double w_pr = reversed_ramp ? 1.0 - r.lambda_t : r.lambda_t;
    return w_seg * seg - w_pr * r.l_pr;
}

namespace {

void require_finite(double v, const char* term, std::size_t t)
{
    if (!std::isfinite(v)) {
        throw NumericError(std::string(term) + " is not finite at step " + std::to_string(t));
    }
}

} // namespace

BatchLoss total_loss(const EchoPromptModel& model, std::span<const VideoSample> batch, std::size_t t,
                     const TrainConfig& config)
{
    if (batch.empty()) {
        throw InvalidArgument("total_loss: empty batch");
    }
    std::vector<ag::Var> bce, pixel_text, pr;
    std::vector<ForwardResult> forwards;
    for (const VideoSample& s : batch) {
        const ForwardResult& r = forwards.emplace_back(model.forward(s, config.value_selection));
        bce.push_back(masked_bce(r.logits, s, config.bce_clamp));
        if (model.config().use_text_path) {
            const Shape& b = r.scores.shape();
            pixel_text.push_back(pixel_text_loss(r.scores, downsample_labels(s, b[1], b[2]), config.pixel_text));
        }
        pr.push_back(prompt_loss(r.query, model.pool(), s.view_id));
    }
    const ag::Var l_bce = ag::mean_of(bce);
    const ag::Var l_pt = pixel_text.empty() ? ag::Var::constant(Tensor(Shape{}, 0.0)) : ag::mean_of(pixel_text);
    const ag::Var l_pr = ag::mean_of(pr);

    LossReport r;
    r.step = t;
    r.t_max = config.steps;
    r.lambda_t = lambda_schedule(t, config.steps);
    r.l_bce = l_bce.value().item();
    r.l_pixel_text = l_pt.value().item();
    r.l_pr = l_pr.value().item();
    require_finite(r.l_bce, "l_bce", t);
    require_finite(r.l_pixel_text, "l_pixel_text", t);
    require_finite(r.l_pr, "l_pr", t);

    const std::array<ag::Var, 2> seg_terms{l_pt, l_bce};
    const std::array<double, 2> seg_weights{config.lambda1, config.lambda2};
    const ag::Var l_seg = ag::weighted_sum(seg_terms, seg_weights);
    const double w_seg = config.reversed_ramp ? r.lambda_t : 1.0 - r.lambda_t;
    const double w_pr = config.reversed_ramp ? 1.0 - r.lambda_t : r.lambda_t;
    const std::array<ag::Var, 2> terms{l_seg, l_pr};
    const std::array<double, 2> weights{w_seg, -w_pr};
    ag::Var total = ag::weighted_sum(terms, weights);
    r.l_seg = l_seg.value().item();
    r.l_total = total.value().item();
    require_finite(r.l_seg, "l_seg", t);
    require_finite(r.l_total, "l_total", t);
    return {r, std::move(total), std::move(forwards)};
}

Adam::Adam(std::vector<NamedParam> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps)
{
    for (const NamedParam& p : params_) {
        m_.emplace_back(p.var.value().size(), 0.0);
        v_.emplace_back(p.var.value().size(), 0.0);
    }
}

void Adam::zero_grad()
{
    for (NamedParam& p : params_) {
        p.var.zero_grad();
    }
}

void Adam::step()
{
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const ag::Node& node = *params_[i].var.node();
        if (!node.has_grad()) {
            continue;
        }
        Tensor& value = params_[i].var.mutable_value();
        const Tensor& g = node.grad;
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < value.size(); ++k) {
            m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
            v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
            value[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
        }
    }
}

VideoSample augment_sample(const VideoSample& sample, const AugmentConfig& config, CounterRng rng)
{
    if (!config.enabled) {
        return sample;
    }
    const bool flip = rng.uniform() < config.flip_probability;
    const double angle = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg) * std::numbers::pi / 180.0;
    const double shear = rng.uniform(-config.max_shear, config.max_shear);
    // Forward map p' = R S F p about the image centre; sample through its inverse.
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double a00 = c, a01 = c * shear - s, a10 = s, a11 = s * shear + c;
    const double det = a00 * a11 - a01 * a10;
    const double i00 = a11 / det, i01 = -a01 / det, i10 = -a10 / det, i11 = a00 / det;
    const double cy = (sample.height - 1) / 2.0;
    const double cx = (sample.width - 1) / 2.0;

    VideoSample out = sample;
    std::fill(out.pixels.begin(), out.pixels.end(), 0.0f);
    std::fill(out.masks.begin(), out.masks.end(), std::uint8_t{0});
    for (std::size_t y = 0; y < sample.height; ++y) {
        for (std::size_t x = 0; x < sample.width; ++x) {
            const double dy = static_cast<double>(y) - cy;
            const double dx = static_cast<double>(x) - cx;
            // Matrices act on (x, y) column vectors.
            double sx = i00 * dx + i01 * dy;
            const double sy = i10 * dx + i11 * dy + cy;
            if (flip) {
                sx = -sx;
            }
            sx += cx;
            const long iy = std::lround(sy);
            const long ix = std::lround(sx);
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(sample.height) || ix >= static_cast<long>(sample.width)) {
                continue;
            }
            for (std::size_t t = 0; t < sample.frames; ++t) {
                const std::size_t dst = (t * sample.height + y) * sample.width + x;
                const std::size_t src = (t * sample.height + static_cast<std::size_t>(iy)) * sample.width +
                                        static_cast<std::size_t>(ix);
                out.pixels[dst] = sample.pixels[src];
                for (std::size_t k = 0; k < sample.classes; ++k) {
                    out.masks[dst * sample.classes + k] = sample.masks[src * sample.classes + k];
                }
            }
        }
    }
    return out;
}

TrainResult train(EchoPromptModel& model, const TrainConfig& config, std::span<const VideoSample> samples,
                  const ProgressFn& progress)
{
    validate_train_config(config);
    if (samples.empty()) {
        throw InvalidArgument("train: the training split is empty");
    }
    const std::vector<NamedParam> params = model.parameters();
    Adam optimizer(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon);
    std::vector<Tensor> last_good;
    last_good.reserve(params.size());
    for (const NamedParam& p : params) {
        last_good.push_back(p.var.value());
    }
    auto restore = [&] {
        for (std::size_t i = 0; i < params.size(); ++i) {
            ag::Var v = params[i].var;
            v.mutable_value() = last_good[i];
        }
    };

    const CounterRng root(config.seed);
    std::vector<std::size_t> order(samples.size());
    std::size_t cursor = order.size();
    std::size_t epoch = 0;

    TrainResult result;
    std::vector<VideoSample> batch;
    for (std::size_t t = 0; t < config.steps; ++t) {
        batch.clear();
        while (batch.size() < std::min(config.batch_size, samples.size())) {
            if (cursor == order.size()) {
                std::iota(order.begin(), order.end(), std::size_t{0});
                CounterRng shuffle = root.split("shuffle").split(epoch++);
                for (std::size_t i = order.size(); i > 1; --i) {
                    std::swap(order[i - 1], order[shuffle.below(i)]);
                }
                cursor = 0;
            }
            const VideoSample& s = samples[order[cursor++]];
            batch.push_back(config.augment.enabled
                                ? augment_sample(s, config.augment, root.split("augment").split(t).split(batch.size()))
                                : s);
        }

        optimizer.zero_grad();
        try {
            BatchLoss loss = total_loss(model, batch, t, config);
            if (std::abs(loss.report.l_total) > config.divergence_threshold) {
                throw NumericError("l_total = " + std::to_string(loss.report.l_total) + " exceeds the divergence threshold at step " +
                                   std::to_string(t));
            }
            ag::backward(loss.total);
            for (const NamedParam& p : params) {
                if (p.var.node()->has_grad() && !p.var.node()->grad.all_finite()) {
                    throw NumericError("gradient of " + p.name + " is not finite at step " + std::to_string(t));
                }
            }
            for (std::size_t i = 0; i < params.size(); ++i) {
                last_good[i] = params[i].var.value();
            }
            optimizer.step();
            result.history.push_back(loss.report);
            if (progress) {
                progress(loss.report);
            }
        } catch (const NumericError& e) {
            restore();
            result.aborted = true;
            result.abort_reason = e.what();
            break;
        }
    }
    optimizer.zero_grad();
    return result;
}

std::vector<VideoSample> load_samples(const DatasetManifest& manifest, const std::filesystem::path& dir,
                                      std::optional<Split> split)
{
    std::vector<VideoSample> out;
    for (const ManifestEntry& e : manifest.samples) {
        if (split && e.split != *split) {
            continue;
        }
        VideoSample s = read_sample(dir / e.path);
        if (s.sample_id != e.id || s.view_id != e.view) {
            throw InvalidArgument("manifest entry '" + e.id + "' does not match file " + e.path);
        }
        if (s.classes != manifest.classes.size()) {
            throw InvalidArgument("sample '" + e.id + "' has " + std::to_string(s.classes) +
                                  " classes, manifest lists " + std::to_string(manifest.classes.size()));
        }
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace echoprompt
