#pragma once

#include "echoprompt/synthetic_data.hpp"

#include "json.hpp"

#include <ostream>
#include <string>
#include <vector>

namespace echoprompt {

struct SynthConfig {
    std::uint64_t seed = 0;
    VideoDims dims;
    std::vector<std::string> classes = default_class_names();
    double split_fraction = 0.8;
    std::vector<ViewSpec> views;
    std::vector<std::size_t> counts;  // per view
};

/// "views" is required; every other key has a default.
SynthConfig synth_config_from_json(const nlohmann::json& doc);

/// Writes every manifest sample as .evs plus manifest.json into `out_dir`.
DatasetManifest synthesize_dataset(const SynthConfig& config, const std::filesystem::path& out_dir);

/// Runs one subcommand. `args` excludes the program name. Returns the exit
/// code: 0 ok, 1 runtime failure, 2 configuration or usage error. Errors are
/// written to `err` as a single line.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace echoprompt
