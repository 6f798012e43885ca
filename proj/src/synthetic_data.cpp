#include "echoprompt/synthetic_data.hpp"

#include "echoprompt/error.hpp"
#include "echoprompt/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <cstdio>
#include <iterator>
#include <set>

namespace echoprompt {

namespace {

struct Ellipse {
    double cx, cy, rx, ry;

    bool contains(double u, double v) const noexcept
    {
        const double a = (u - cx) / rx;
        const double b = (v - cy) / ry;
        return a * a + b * b <= 1.0;
    }
};

// A chamber is a blood pool surrounded by a bright wall of fixed thickness.
struct Chamber {
    Ellipse cavity;
    double wall;

    Ellipse outer() const noexcept { return {cavity.cx, cavity.cy, cavity.rx + wall, cavity.ry + wall}; }
};

// Nominal chamber layout in unit coordinates; chamber 0 is the labelled LV.
struct Layout {
    std::vector<Ellipse> chambers;
    double wall;
};

Layout nominal_layout(GeometryFamily g)
{
    switch (g) {
    case GeometryFamily::two_blob:
        return {{{0.50, 0.40, 0.11, 0.19}, {0.50, 0.82, 0.10, 0.07}}, 0.035};
    case GeometryFamily::four_blob:
        return {{{0.40, 0.38, 0.075, 0.16},
                 {0.64, 0.38, 0.065, 0.13},
                 {0.40, 0.78, 0.070, 0.07},
                 {0.64, 0.78, 0.065, 0.07}},
                0.03};
    case GeometryFamily::annulus:
        return {{{0.50, 0.50, 0.15, 0.15}}, 0.06};
    }
    return {};
}

bool inside_sector(SectorShape s, double u, double v) noexcept
{
    if (s == SectorShape::circle) {
        const double du = u - 0.5;
        const double dv = v - 0.5;
        return du * du + dv * dv <= 0.46 * 0.46;
    }
    // Cone with apex at the top centre, 40 degree half-angle.
    const double du = u - 0.5;
    if (v <= 0.0) {
        return false;
    }
    const double half_angle = 40.0 * std::numbers::pi / 180.0;
    return std::atan2(std::abs(du), v) <= half_angle && du * du + v * v <= 0.97 * 0.97;
}

constexpr double kTissue = 0.35;
constexpr double kWall = 0.75;
constexpr double kBlood = 0.08;

void require(bool ok, const std::string& message)
{
    if (!ok) {
        throw InvalidArgument(message);
    }
}

} // namespace

std::string_view to_string(GeometryFamily g) noexcept
{
    switch (g) {
    case GeometryFamily::two_blob: return "two_blob";
    case GeometryFamily::four_blob: return "four_blob";
    case GeometryFamily::annulus: return "annulus";
    }
    return "unknown";
}

std::string_view to_string(SectorShape s) noexcept
{
    return s == SectorShape::cone ? "cone" : "circle";
}

GeometryFamily parse_geometry(std::string_view name)
{
    if (name == "two_blob") return GeometryFamily::two_blob;
    if (name == "four_blob") return GeometryFamily::four_blob;
    if (name == "annulus") return GeometryFamily::annulus;
    throw InvalidArgument("unknown geometry family '" + std::string(name) + "'");
}

SectorShape parse_sector(std::string_view name)
{
    if (name == "cone") return SectorShape::cone;
    if (name == "circle") return SectorShape::circle;
    throw InvalidArgument("unknown sector shape '" + std::string(name) + "'");
}

std::size_t supported_classes(GeometryFamily) noexcept { return 2; }

std::vector<ViewSpec> default_view_specs()
{
    return {
        {0, "A2C", GeometryFamily::two_blob, SectorShape::cone, 0.15, 0.00, 0.30},
        {1, "A4C", GeometryFamily::four_blob, SectorShape::cone, 0.15, 0.08, 0.30},
        {2, "PSAX", GeometryFamily::annulus, SectorShape::circle, 0.15, 0.16, 0.25},
    };
}

std::vector<std::string> default_class_names()
{
    return {"left ventricle endocardium", "left ventricle epicardium"};
}

void validate_view_specs(const std::vector<ViewSpec>& specs)
{
    require(!specs.empty(), "view spec list is empty");
    std::set<std::pair<GeometryFamily, SectorShape>> seen;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const ViewSpec& s = specs[i];
        require(s.view_id == i, "view ids must be 0..K-1 in order; entry " + std::to_string(i) + " has id " +
                                    std::to_string(s.view_id));
        require(s.noise_level >= 0.0, "view " + s.name + ": noise_level must be >= 0");
        require(s.deform_amplitude >= 0.0 && s.deform_amplitude <= 0.4,
                "view " + s.name + ": deform_amplitude must lie in [0, 0.4]");
        require(seen.insert({s.geometry, s.sector}).second,
                "view " + s.name + ": (geometry, sector) duplicates an earlier view");
    }
}

bool VideoSample::is_labeled(std::size_t t) const noexcept
{
    return std::find(labeled_frames.begin(), labeled_frames.end(), t) != labeled_frames.end();
}

std::vector<std::uint8_t> VideoSample::frame_flags() const
{
    std::vector<std::uint8_t> flags(frames, 0);
    for (auto t : labeled_frames) {
        flags[t] = 1;
    }
    return flags;
}

std::size_t VideoSample::mask_area(std::size_t t, std::size_t c) const noexcept
{
    std::size_t area = 0;
    const std::size_t base = t * frame_size();
    for (std::size_t p = 0; p < frame_size(); ++p) {
        area += masks[(base + p) * classes + c] != 0;
    }
    return area;
}

void validate_sample(const VideoSample& s)
{
    require(s.frames >= 1 && s.height >= 1 && s.width >= 1 && s.classes >= 1, "sample dims must be positive");
    const std::size_t n = std::size_t{s.frames} * s.height * s.width;
    require(s.pixels.size() == n, "pixel count does not match dims");
    require(s.masks.size() == n * s.classes, "mask count does not match dims");
    require(!s.labeled_frames.empty() && s.labeled_frames.size() <= s.frames, "labeled frame set size invalid");
    for (std::size_t i = 0; i < s.labeled_frames.size(); ++i) {
        require(s.labeled_frames[i] < s.frames, "labeled frame index out of range");
        require(i == 0 || s.labeled_frames[i] > s.labeled_frames[i - 1], "labeled frames must be ascending");
    }
    for (float v : s.pixels) {
        require(std::isfinite(v) && v >= 0.0f && v <= 1.0f, "pixel outside [0,1]");
    }
    for (std::size_t t = 0; t < s.frames; ++t) {
        const bool labeled = s.is_labeled(t);
        const std::size_t begin = t * s.frame_size() * s.classes;
        for (std::size_t i = begin; i < begin + s.frame_size() * s.classes; ++i) {
            require(s.masks[i] <= 1, "mask values must be binary");
            require(labeled || s.masks[i] == 0, "mask set on unlabeled frame " + std::to_string(t));
        }
    }
}

double area_factor(double deform_amplitude, std::uint32_t t, std::uint32_t frames) noexcept
{
    return 1.0 + deform_amplitude * std::sin(2.0 * std::numbers::pi * t / frames);
}

std::vector<std::uint32_t> extremal_frames(double deform_amplitude, std::uint32_t frames)
{
    std::uint32_t ed = 0;
    for (std::uint32_t t = 1; t < frames; ++t) {
        if (area_factor(deform_amplitude, t, frames) > area_factor(deform_amplitude, ed, frames)) {
            ed = t;
        }
    }
    std::uint32_t es = ed == 0 ? 1 : 0;
    for (std::uint32_t t = 0; t < frames; ++t) {
        if (t != ed && area_factor(deform_amplitude, t, frames) < area_factor(deform_amplitude, es, frames)) {
            es = t;
        }
    }
    std::vector<std::uint32_t> out{ed, es};
    std::sort(out.begin(), out.end());
    return out;
}

VideoSample generate_sample(const ViewSpec& spec, std::uint64_t seed, const VideoDims& dims,
                            std::string sample_id, std::string dataset_id)
{
    require(dims.frames >= 4, "generate_sample: T must be >= 4, got " + std::to_string(dims.frames));
    require(dims.height >= 16 && dims.width >= 16,
            "generate_sample: H and W must be >= 16, got " + std::to_string(dims.height) + "x" +
                std::to_string(dims.width));
    require(dims.classes >= 1, "generate_sample: need at least one class");
    require(dims.classes <= supported_classes(spec.geometry),
            "generate_sample: geometry " + std::string(to_string(spec.geometry)) + " supports at most " +
                std::to_string(supported_classes(spec.geometry)) + " classes, requested " +
                std::to_string(dims.classes));
    require(spec.deform_amplitude >= 0.0 && spec.deform_amplitude <= 0.4, "generate_sample: deform_amplitude out of [0, 0.4]");
    require(spec.noise_level >= 0.0, "generate_sample: noise_level must be >= 0");

    const CounterRng root(seed);
    CounterRng shape_rng = root.split("geometry");
    const double shift_u = shape_rng.uniform(-0.03, 0.03);
    const double shift_v = shape_rng.uniform(-0.03, 0.03);
    const double size = shape_rng.uniform(0.9, 1.1);

    const Layout layout = nominal_layout(spec.geometry);

    VideoSample out;
    out.frames = dims.frames;
    out.height = dims.height;
    out.width = dims.width;
    out.classes = dims.classes;
    out.view_id = spec.view_id;
    out.sample_id = std::move(sample_id);
    out.dataset_id = std::move(dataset_id);
    out.seed = seed;
    out.labeled_frames = extremal_frames(spec.deform_amplitude, dims.frames);
    out.pixels.assign(std::size_t{dims.frames} * dims.height * dims.width, 0.0f);
    out.masks.assign(out.pixels.size() * dims.classes, 0);

    for (std::uint32_t t = 0; t < dims.frames; ++t) {
        // Ventricle and atria beat in anti-phase.
        const double lv_scale = std::sqrt(area_factor(spec.deform_amplitude, t, dims.frames));
        const double other_scale = std::sqrt(2.0 - area_factor(spec.deform_amplitude, t, dims.frames));
        std::vector<Chamber> chambers;
        for (std::size_t i = 0; i < layout.chambers.size(); ++i) {
            const Ellipse& e = layout.chambers[i];
            const double k = size * (i == 0 ? lv_scale : other_scale);
            chambers.push_back({{e.cx + shift_u, e.cy + shift_v, e.rx * k, e.ry * k}, layout.wall * size});
        }
        const bool labeled = out.is_labeled(t);
        CounterRng speckle = root.split("speckle").split(t);
        for (std::uint32_t y = 0; y < dims.height; ++y) {
            const double v = (y + 0.5) / dims.height;
            for (std::uint32_t x = 0; x < dims.width; ++x) {
                const double u = (x + 0.5) / dims.width;
                const std::size_t idx = (std::size_t{t} * dims.height + y) * dims.width + x;
                double value = 0.0;
                if (inside_sector(spec.sector, u, v)) {
                    value = kTissue;
                    for (const Chamber& c : chambers) {
                        if (c.cavity.contains(u, v)) {
                            value = kBlood;
                            break;
                        }
                        if (c.outer().contains(u, v)) {
                            value = kWall;
                        }
                    }
                    value = std::clamp(value + spec.intensity_bias, 0.0, 1.0);
                }
                // Draw unconditionally so the noise field does not depend on geometry.
                const double noise = speckle.uniform(-1.0, 1.0);
                value = std::clamp(value * (1.0 + spec.noise_level * noise), 0.0, 1.0);
                out.pixels[idx] = static_cast<float>(value);
                if (labeled) {
                    out.masks[idx * dims.classes] = chambers[0].cavity.contains(u, v) ? 1 : 0;
                    if (dims.classes >= 2) {
                        out.masks[idx * dims.classes + 1] = chambers[0].outer().contains(u, v) ? 1 : 0;
                    }
                }
            }
        }
    }
    return out;
}

std::string_view to_string(Split s) noexcept { return s == Split::train ? "train" : "test"; }

Split parse_split(std::string_view name)
{
    if (name == "train") return Split::train;
    if (name == "test") return Split::test;
    throw InvalidArgument("unknown split '" + std::string(name) + "'");
}

std::vector<ManifestEntry> DatasetManifest::entries(Split split) const
{
    std::vector<ManifestEntry> out;
    std::copy_if(samples.begin(), samples.end(), std::back_inserter(out),
                 [split](const ManifestEntry& e) { return e.split == split; });
    return out;
}

DatasetManifest build_manifest(const std::vector<ViewSpec>& specs, const std::vector<std::size_t>& counts,
                               double split_fraction, std::uint64_t seed,
                               const std::vector<std::string>& classes)
{
    require(!specs.empty(), "build_manifest: empty view spec list");
    require(counts.size() == specs.size(), "build_manifest: need one count per view");
    require(split_fraction > 0.0 && split_fraction < 1.0, "build_manifest: split_fraction must lie in (0, 1)");
    require(!classes.empty(), "build_manifest: class list is empty");
    validate_view_specs(specs);

    DatasetManifest manifest;
    manifest.classes = classes;
    const CounterRng root(seed);
    for (std::size_t v = 0; v < specs.size(); ++v) {
        require(counts[v] >= 1, "build_manifest: count for view " + specs[v].name + " must be >= 1");
        manifest.views.push_back(specs[v].name);
        const std::size_t n = counts[v];
        const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * split_fraction));
        // Seeded Fisher-Yates; the first n_train permuted indices train.
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) {
            order[i] = i;
        }
        CounterRng split_rng = root.split("split").split(v);
        for (std::size_t i = n; i > 1; --i) {
            std::swap(order[i - 1], order[split_rng.below(i)]);
        }
        std::vector<Split> assignment(n, Split::test);
        for (std::size_t i = 0; i < std::min(n_train, n); ++i) {
            assignment[order[i]] = Split::train;
        }
        for (std::size_t i = 0; i < n; ++i) {
            char index[24];
            std::snprintf(index, sizeof index, "%03zu", i);
            ManifestEntry e;
            e.id = specs[v].name + "_" + index;
            e.path = e.id + ".evs";
            e.view = static_cast<std::uint32_t>(v);
            e.dataset = "synth_" + specs[v].name;
            e.split = assignment[i];
            e.seed = root.split("sample").split(v).split(i).key();
            manifest.samples.push_back(std::move(e));
        }
    }
    validate_manifest(manifest);
    return manifest;
}

} // namespace echoprompt
