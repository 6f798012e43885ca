#include "echoprompt/evaluation.hpp"

#include "echoprompt/error.hpp"

#include <cmath>

namespace echoprompt {

double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth)
{
    if (pred.size() != truth.size()) {
        throw InvalidArgument("dice: masks differ in size");
    }
    std::size_t inter = 0, p = 0, g = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred[i] != 0;
        const bool b = truth[i] != 0;
        p += a;
        g += b;
        inter += a && b;
    }
    if (p + g == 0) {
        return 1.0;
    }
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

namespace {

struct Accumulator {
    std::vector<std::vector<double>> sum;     // [view][class]
    std::vector<std::vector<std::size_t>> n;  // [view][class]
};

/// Adds the per-frame Dice of one prediction to the accumulator.
void accumulate(const VideoSample& s, const Tensor& prob, Accumulator& acc)
{
    const std::size_t frame = s.frame_size();
    std::vector<std::uint8_t> pred(frame), truth(frame);
    for (std::uint32_t t : s.labeled_frames) {
        for (std::size_t c = 0; c < s.classes; ++c) {
            for (std::size_t i = 0; i < frame; ++i) {
                const std::size_t k = (t * frame + i) * s.classes + c;
                pred[i] = prob[k] >= 0.5 ? 1 : 0;
                truth[i] = s.masks[k];
            }
            acc.sum[s.view_id][c] += dice(pred, truth);
            ++acc.n[s.view_id][c];
        }
    }
}

} // namespace

MetricsDocument evaluate(const EchoPromptModel& model, std::span<const VideoSample> samples, bool use_view_info)
{
    const auto& views = model.config().view_names;
    const auto& classes = model.config().class_names;
    const std::size_t k = views.size();
    Accumulator acc{std::vector(k, std::vector<double>(classes.size(), 0.0)),
                    std::vector(k, std::vector<std::size_t>(classes.size(), 0))};
    MetricsDocument m;
    m.view_confusion.assign(k, std::vector<std::size_t>(k, 0));
    std::size_t correct = 0;
    for (const VideoSample& s : samples) {
        const Prediction p = model.predict(s, use_view_info);
        accumulate(s, p.probabilities, acc);
        ++m.view_confusion[s.view_id][p.view];
        correct += p.view == s.view_id;
    }
    double total = 0.0;
    std::size_t cells = 0;
    for (std::size_t v = 0; v < k; ++v) {
        if (acc.n[v].empty() || acc.n[v][0] == 0) {
            continue;
        }
        ViewDice vd{views[v], {}};
        for (std::size_t c = 0; c < classes.size(); ++c) {
            const double d = acc.sum[v][c] / static_cast<double>(acc.n[v][c]);
            vd.classes.push_back({classes[c], d});
            total += d;
            ++cells;
        }
        m.per_view.push_back(std::move(vd));
    }
    m.mean_dice = cells == 0 ? 0.0 : total / static_cast<double>(cells);
    m.view_accuracy = samples.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(samples.size());
    return m;
}

double mean_labeled_dice(const EchoPromptModel& model, std::span<const VideoSample> samples, bool use_view_info)
{
    double sum = 0.0;
    std::size_t n = 0;
    for (const VideoSample& s : samples) {
        const Prediction p = model.predict(s, use_view_info);
        Accumulator acc{std::vector(model.config().view_names.size(), std::vector<double>(s.classes, 0.0)),
                        std::vector(model.config().view_names.size(), std::vector<std::size_t>(s.classes, 0))};
        accumulate(s, p.probabilities, acc);
        for (std::size_t c = 0; c < s.classes; ++c) {
            sum += acc.sum[s.view_id][c];
            n += acc.n[s.view_id][c];
        }
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

nlohmann::ordered_json metrics_to_json(const MetricsDocument& m)
{
    nlohmann::ordered_json j;
    nlohmann::ordered_json per_view = nlohmann::ordered_json::object();
    for (const ViewDice& v : m.per_view) {
        nlohmann::ordered_json cells = nlohmann::ordered_json::object();
        for (const ClassDice& c : v.classes) {
            cells[c.class_name] = c.dice;
        }
        per_view[v.view_name] = cells;
    }
    j["per_view"] = per_view;
    j["mean_dice"] = m.mean_dice;
    j["view_accuracy"] = m.view_accuracy;
    j["view_confusion"] = m.view_confusion;
    j["config"] = m.config;
    return j;
}

std::vector<std::string> metrics_schema_errors(const nlohmann::json& doc)
{
    std::vector<std::string> errors;
    auto in_unit = [](const nlohmann::json& v) {
        return v.is_number() && std::isfinite(v.get<double>()) && v.get<double>() >= 0.0 && v.get<double>() <= 1.0;
    };
    if (!doc.is_object()) {
        return {"document is not an object"};
    }
    for (const char* key : {"per_view", "mean_dice", "view_accuracy", "view_confusion", "config"}) {
        if (!doc.contains(key)) {
            errors.push_back(std::string("missing key '") + key + "'");
        }
    }
    if (!errors.empty()) {
        return errors;
    }
    double sum = 0.0;
    std::size_t cells = 0;
    if (!doc["per_view"].is_object()) {
        errors.emplace_back("per_view is not an object");
    } else {
        for (const auto& [view, classes] : doc["per_view"].items()) {
            if (!classes.is_object() || classes.empty()) {
                errors.push_back("per_view." + view + " is not a non-empty object");
                continue;
            }
            for (const auto& [name, value] : classes.items()) {
                if (!in_unit(value)) {
                    errors.push_back("per_view." + view + "." + name + " is not a number in [0, 1]");
                    continue;
                }
                sum += value.get<double>();
                ++cells;
            }
        }
    }
    if (!in_unit(doc["mean_dice"])) {
        errors.emplace_back("mean_dice is not a number in [0, 1]");
    } else if (cells > 0 && std::abs(doc["mean_dice"].get<double>() - sum / static_cast<double>(cells)) > 1e-9) {
        errors.emplace_back("mean_dice does not equal the mean of the per_view cells");
    }
    if (!in_unit(doc["view_accuracy"])) {
        errors.emplace_back("view_accuracy is not a number in [0, 1]");
    }
    const auto& conf = doc["view_confusion"];
    if (!conf.is_array()) {
        errors.emplace_back("view_confusion is not an array");
    } else {
        for (const auto& row : conf) {
            if (!row.is_array() || row.size() != conf.size()) {
                errors.emplace_back("view_confusion is not square");
                break;
            }
            for (const auto& v : row) {
                if (!v.is_number_unsigned()) {
                    errors.emplace_back("view_confusion holds a non-count entry");
                    break;
                }
            }
        }
    }
    if (!doc["config"].is_object()) {
        errors.emplace_back("config is not an object");
    }
    return errors;
}

} // namespace echoprompt
