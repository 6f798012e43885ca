// .evs sample files and manifest.json.
#include "echoprompt/error.hpp"
#include "echoprompt/synthetic_data.hpp"

#include "json.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace echoprompt {

namespace {

constexpr char kMagic[4] = {'E', 'V', 'S', '1'};

class ByteWriter {
public:
    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i) {
            bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
    void u64(std::uint64_t v)
    {
        for (int i = 0; i < 8; ++i) {
            bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void raw(const void* data, std::size_t n)
    {
        const auto* p = static_cast<const std::uint8_t*>(data);
        bytes_.insert(bytes_.end(), p, p + n);
    }
    void str(const std::string& s)
    {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }

private:
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

    void need(std::size_t n, const char* section) const
    {
        if (remaining() < n) {
            throw ParseError(section, "truncated: need " + std::to_string(n) + " bytes, have " +
                                          std::to_string(remaining()));
        }
    }
    std::uint32_t u32(const char* section)
    {
        need(4, section);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 4;
        return v;
    }
    std::uint64_t u64(const char* section)
    {
        need(8, section);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 8;
        return v;
    }
    float f32(const char* section) { return std::bit_cast<float>(u32(section)); }
    const std::uint8_t* take(std::size_t n, const char* section)
    {
        need(n, section);
        const std::uint8_t* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::string str(const char* section)
    {
        const std::uint32_t n = u32(section);
        const auto* p = take(n, section);
        return std::string(reinterpret_cast<const char*>(p), n);
    }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::vector<std::uint8_t> encode_sample(const VideoSample& s)
{
    validate_sample(s);
    ByteWriter w;
    w.raw(kMagic, 4);
    w.u32(s.frames);
    w.u32(s.height);
    w.u32(s.width);
    w.u32(s.classes);
    w.u32(static_cast<std::uint32_t>(s.labeled_frames.size()));
    for (auto t : s.labeled_frames) {
        w.u32(t);
    }
    for (float v : s.pixels) {
        w.f32(v);
    }
    w.raw(s.masks.data(), s.masks.size());
    w.u32(s.view_id);
    w.str(s.sample_id);
    w.str(s.dataset_id);
    // Optional trailer: generator seed.
    w.u64(s.seed);
    return w.take();
}

VideoSample decode_sample(const std::vector<std::uint8_t>& bytes)
{
    ByteReader r(bytes);
    const auto* magic = r.take(4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw ParseError("magic", "expected 'EVS1'");
    }
    VideoSample s;
    s.frames = r.u32("header");
    s.height = r.u32("header");
    s.width = r.u32("header");
    s.classes = r.u32("header");
    if (s.frames == 0 || s.height == 0 || s.width == 0 || s.classes == 0) {
        throw ParseError("header", "zero dimension");
    }
    const std::uint32_t label_count = r.u32("labeled_frames");
    if (label_count == 0 || label_count > s.frames) {
        throw ParseError("labeled_frames", "count " + std::to_string(label_count) + " invalid for T=" +
                                               std::to_string(s.frames));
    }
    for (std::uint32_t i = 0; i < label_count; ++i) {
        const std::uint32_t t = r.u32("labeled_frames");
        if (t >= s.frames || (!s.labeled_frames.empty() && t <= s.labeled_frames.back())) {
            throw ParseError("labeled_frames", "index " + std::to_string(t) + " out of range or not ascending");
        }
        s.labeled_frames.push_back(t);
    }
    const std::size_t n = std::size_t{s.frames} * s.height * s.width;
    // Payload must hold frames, masks, view id and two length prefixes.
    const std::size_t minimum = n * 4 + n * s.classes + 12;
    if (r.remaining() < minimum) {
        const char* section = r.remaining() < n * 4 ? "frames" : r.remaining() < n * (4 + s.classes) ? "masks" : "trailer";
        throw ParseError(section, "header dims imply at least " + std::to_string(minimum) +
                                      " payload bytes, file has " + std::to_string(r.remaining()));
    }
    s.pixels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        s.pixels[i] = r.f32("frames");
    }
    const auto* mask_bytes = r.take(n * s.classes, "masks");
    s.masks.assign(mask_bytes, mask_bytes + n * s.classes);
    s.view_id = r.u32("view_id");
    s.sample_id = r.str("sample_id");
    s.dataset_id = r.str("dataset_id");
    if (r.remaining() == 8) {
        s.seed = r.u64("seed");
    } else if (r.remaining() != 0) {
        throw ParseError("trailer", "payload length inconsistent with header dims (" +
                                        std::to_string(r.remaining()) + " unexpected bytes)");
    }
    try {
        validate_sample(s);
    } catch (const InvalidArgument& e) {
        throw ParseError("masks", e.what());
    }
    return s;
}

void write_sample(const VideoSample& sample, const std::filesystem::path& path)
{
    const auto bytes = encode_sample(sample);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

VideoSample read_sample(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_sample(bytes);
}

void validate_manifest(const DatasetManifest& m)
{
    if (m.classes.empty()) {
        throw InvalidArgument("manifest: class list is empty");
    }
    if (m.views.empty()) {
        throw InvalidArgument("manifest: view list is empty");
    }
    std::set<std::string> ids;
    for (const auto& e : m.samples) {
        if (!ids.insert(e.id).second) {
            throw InvalidArgument("manifest: duplicate sample id '" + e.id + "'");
        }
        if (e.view >= m.views.size()) {
            throw InvalidArgument("manifest: sample '" + e.id + "' has view " + std::to_string(e.view) +
                                  " but only " + std::to_string(m.views.size()) + " views exist");
        }
    }
}

std::string manifest_to_json(const DatasetManifest& m)
{
    nlohmann::ordered_json doc;
    doc["classes"] = m.classes;
    doc["views"] = m.views;
    doc["samples"] = nlohmann::ordered_json::array();
    for (const auto& e : m.samples) {
        doc["samples"].push_back({{"id", e.id},
                                  {"path", e.path},
                                  {"view", e.view},
                                  {"dataset", e.dataset},
                                  {"split", std::string(to_string(e.split))},
                                  {"seed", e.seed}});
    }
    return doc.dump(2) + "\n";
}

DatasetManifest manifest_from_json(std::string_view text)
{
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("manifest", e.what());
    }
    DatasetManifest m;
    try {
        m.classes = doc.at("classes").get<std::vector<std::string>>();
        m.views = doc.at("views").get<std::vector<std::string>>();
        for (const auto& s : doc.at("samples")) {
            ManifestEntry e;
            e.id = s.at("id").get<std::string>();
            e.path = s.at("path").get<std::string>();
            e.view = s.at("view").get<std::uint32_t>();
            e.dataset = s.at("dataset").get<std::string>();
            e.split = parse_split(s.at("split").get<std::string>());
            e.seed = s.value("seed", std::uint64_t{0});
            m.samples.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("manifest", e.what());
    }
    validate_manifest(m);
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out << manifest_to_json(manifest);
}

DatasetManifest load_manifest(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open manifest " + path.string());
    }
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return manifest_from_json(text);
}

} // namespace echoprompt
