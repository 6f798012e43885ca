#pragma once

#include "echoprompt/model.hpp"

#include "json.hpp"

#include <span>
#include <string>
#include <vector>

namespace echoprompt {

/// 2|P & G| / (|P| + |G|); 1 when both masks are empty.
double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

struct ClassDice {
    std::string class_name;
    double dice = 0.0;
};

struct ViewDice {
    std::string view_name;
    std::vector<ClassDice> classes;
};

struct MetricsDocument {
    std::vector<ViewDice> per_view;  // views with at least one sample
    double mean_dice = 0.0;          // mean over all (view, class) cells
    double view_accuracy = 0.0;
    std::vector<std::vector<std::size_t>> view_confusion;  // [true][predicted]
    nlohmann::ordered_json config = nlohmann::ordered_json::object();
};

/// Dice per (sample, labeled frame, class) averaged into per-view cells, with
/// predictions thresholded at 0.5. View accuracy compares the reported view to
/// the ground truth.
MetricsDocument evaluate(const EchoPromptModel& model, std::span<const VideoSample> samples,
                         bool use_view_info = false);

/// Mean Dice over every labeled frame and class of the given samples.
double mean_labeled_dice(const EchoPromptModel& model, std::span<const VideoSample> samples,
                         bool use_view_info = false);

nlohmann::ordered_json metrics_to_json(const MetricsDocument& metrics);

/// Problems found when checking a metrics document against its schema; empty
/// when valid.
std::vector<std::string> metrics_schema_errors(const nlohmann::json& doc);

} // namespace echoprompt
