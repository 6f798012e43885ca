#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace echoprompt {

enum class GeometryFamily { two_blob, four_blob, annulus };
enum class SectorShape { cone, circle };

std::string_view to_string(GeometryFamily g) noexcept;
std::string_view to_string(SectorShape s) noexcept;
GeometryFamily parse_geometry(std::string_view name);
SectorShape parse_sector(std::string_view name);

/// Largest class count a geometry family can label (endo, epi analogs).
std::size_t supported_classes(GeometryFamily g) noexcept;

/// Rendering recipe for one synthetic scan view.
struct ViewSpec {
    std::uint32_t view_id = 0;
    std::string name;
    GeometryFamily geometry = GeometryFamily::two_blob;
    SectorShape sector = SectorShape::cone;
    double noise_level = 0.0;
    double intensity_bias = 0.0;
    double deform_amplitude = 0.0;

    friend bool operator==(const ViewSpec&, const ViewSpec&) = default;
};

/// The A2C / A4C / PSAX analogs used by default.
std::vector<ViewSpec> default_view_specs();

/// Throws InvalidArgument when two views share (geometry, sector) or ids are
/// not 0..K-1 in order.
void validate_view_specs(const std::vector<ViewSpec>& specs);

struct VideoDims {
    std::uint32_t frames = 8;
    std::uint32_t height = 64;
    std::uint32_t width = 64;
    std::uint32_t classes = 2;
};

/// One clip with sparse per-frame labels. Frames are [T, H, W] and masks are
/// [T, H, W, N] (channels last); mask entries are zero at unlabeled frames.
struct VideoSample {
    std::uint32_t frames = 0;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::uint32_t classes = 0;
    std::vector<float> pixels;
    std::vector<std::uint8_t> masks;
    std::vector<std::uint32_t> labeled_frames;  // ascending
    std::uint32_t view_id = 0;
    std::string dataset_id;
    std::string sample_id;
    std::uint64_t seed = 0;

    std::size_t frame_size() const noexcept { return std::size_t{height} * width; }
    float pixel(std::size_t t, std::size_t y, std::size_t x) const noexcept
    {
        return pixels[(t * height + y) * width + x];
    }
    std::uint8_t mask(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const noexcept
    {
        return masks[((t * height + y) * width + x) * classes + c];
    }
    bool is_labeled(std::size_t t) const noexcept;
    /// One flag per frame: 1 where labeled.
    std::vector<std::uint8_t> frame_flags() const;
    /// Number of set pixels of class `c` in frame `t`.
    std::size_t mask_area(std::size_t t, std::size_t c) const noexcept;

    friend bool operator==(const VideoSample&, const VideoSample&) = default;
};

/// Checks the VideoSample invariants; throws InvalidArgument on violation.
void validate_sample(const VideoSample& sample);

/// Relative class-0 area at frame t: 1 + a * sin(2 pi t / T).
double area_factor(double deform_amplitude, std::uint32_t t, std::uint32_t frames) noexcept;

/// Frames of maximal and minimal class-0 area (ED / ES analogs), ascending.
/// Ties resolve to the lowest index; the minimum is taken over frames other
/// than the maximum so two distinct frames are always returned.
std::vector<std::uint32_t> extremal_frames(double deform_amplitude, std::uint32_t frames);

/// Renders a clip as a pure function of (spec, seed, dims).
VideoSample generate_sample(const ViewSpec& spec, std::uint64_t seed, const VideoDims& dims,
                            std::string sample_id = {}, std::string dataset_id = {});

// .evs serialization.
std::vector<std::uint8_t> encode_sample(const VideoSample& sample);
VideoSample decode_sample(const std::vector<std::uint8_t>& bytes);
void write_sample(const VideoSample& sample, const std::filesystem::path& path);
VideoSample read_sample(const std::filesystem::path& path);

// Dataset manifest.
enum class Split { train, test };
std::string_view to_string(Split s) noexcept;
Split parse_split(std::string_view name);

struct ManifestEntry {
    std::string id;
    std::string path;  // relative to the manifest directory
    std::uint32_t view = 0;
    std::string dataset;
    Split split = Split::train;
    std::uint64_t seed = 0;

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
    std::vector<std::string> classes;
    std::vector<std::string> views;
    std::vector<ManifestEntry> samples;

    std::vector<ManifestEntry> entries(Split split) const;
    friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Per-view train/test assignment: round(count * split_fraction) train, the
/// remainder test, chosen by a seeded permutation. Entries are ordered by
/// view, then index.
DatasetManifest build_manifest(const std::vector<ViewSpec>& specs, const std::vector<std::size_t>& counts,
                               double split_fraction, std::uint64_t seed,
                               const std::vector<std::string>& classes);

void validate_manifest(const DatasetManifest& manifest);
std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(std::string_view text);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Default class names (foreground only).
std::vector<std::string> default_class_names();

} // namespace echoprompt
