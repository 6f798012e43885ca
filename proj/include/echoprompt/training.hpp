#pragma once

#include "echoprompt/model.hpp"

#include "json.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace echoprompt {

/// exp(-5 (1 - t / t_max)^2). Steps past t_max clamp to 1 with a warning on
/// stderr.
double lambda_schedule(std::size_t t, std::size_t t_max);

/// Pixel BCE over the labeled frames of `sample`, logits clamped to
/// +-clamp. Returns 0 (with a warning) when no frame is labeled.
ag::Var masked_bce(const ag::Var& logits, const VideoSample& sample, double clamp = 15.0);

struct LossReport {
    double l_bce = 0.0;
    double l_pixel_text = 0.0;
    double l_pr = 0.0;
    double lambda_t = 0.0;
    double l_seg = 0.0;
    double l_total = 0.0;
    std::size_t step = 0;
    std::size_t t_max = 0;
};

nlohmann::ordered_json loss_report_to_json(const LossReport& r);

struct AugmentConfig {
    bool enabled = false;
    double flip_probability = 0.5;
    double max_rotation_deg = 30.0;
    double max_shear = 0.1;
};

struct TrainConfig {
    ModelConfig model;
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    double learning_rate = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::size_t batch_size = 2;
    std::size_t steps = 500;  // t_max
    std::uint64_t seed = 0;
    PixelTextConfig pixel_text;
    PromptSelection value_selection = PromptSelection::assigned;
    /// Puts (1 - lambda) on the prompt term and lambda on the segmentation term.
    bool reversed_ramp = false;
    double bce_clamp = 15.0;
    double divergence_threshold = 1e6;
    bool use_view_info = false;  // evaluation default
    AugmentConfig augment;
};

nlohmann::ordered_json train_config_to_json(const TrainConfig& config);
/// Absent keys keep their defaults; unknown keys and bad values throw
/// InvalidArgument naming the field.
TrainConfig train_config_from_json(const nlohmann::json& doc);
void validate_train_config(const TrainConfig& config);

/// Graph handles for one batch. `total` is the differentiable l_total.
struct BatchLoss {
    LossReport report;
    ag::Var total;
    std::vector<ForwardResult> forwards;  // one per sample
};

/// Loss for a batch of samples at step t. Terms are batch means. Throws
/// NumericError naming the first non-finite term.
BatchLoss total_loss(const EchoPromptModel& model, std::span<const VideoSample> batch, std::size_t t,
                     const TrainConfig& config);

/// l_total recomputed from the logged terms.
double recompose_total(const LossReport& r, double lambda1, double lambda2, bool reversed_ramp = false);

class Adam {
public:
    Adam(std::vector<NamedParam> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step();
    void zero_grad();
    std::size_t steps_taken() const noexcept { return t_; }

private:
    std::vector<NamedParam> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

/// Random flip, rotation and shear applied identically to frames and masks.
VideoSample augment_sample(const VideoSample& sample, const AugmentConfig& config, CounterRng rng);

struct TrainResult {
    std::vector<LossReport> history;
    bool aborted = false;
    std::string abort_reason;
};

using ProgressFn = std::function<void(const LossReport&)>;

/// Optimises l_total with Adam for config.steps steps over `samples`.
/// On a non-finite term or |l_total| above the divergence threshold the run
/// stops and the model keeps the last parameters that produced a finite loss.
TrainResult train(EchoPromptModel& model, const TrainConfig& config, std::span<const VideoSample> samples,
                  const ProgressFn& progress = {});

/// Loads every sample of `split` (all when nullopt) from the manifest directory.
std::vector<VideoSample> load_samples(const DatasetManifest& manifest, const std::filesystem::path& dir,
                                      std::optional<Split> split);

} // namespace echoprompt
