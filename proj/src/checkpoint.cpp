#include "echoprompt/checkpoint.hpp"

#include "echoprompt/error.hpp"
#include "echoprompt/rng.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace echoprompt {

namespace {

constexpr char kMagic[4] = {'E', 'P', 'C', 'K'};

std::uint64_t checksum(const std::uint8_t* data, std::size_t n)
{
    return fnv1a64(std::string_view(reinterpret_cast<const char*>(data), n));
}

class Writer {
public:
    void bytes(const void* p, std::size_t n)
    {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v)
    {
        for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str32(const std::string& s)
    {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    std::vector<std::uint8_t> out;
};

class Reader {
public:
    Reader(const std::vector<std::uint8_t>& b, std::size_t end) : bytes_(b), end_(end) {}

    void need(std::size_t n, const char* section) const
    {
        if (end_ - pos_ < n) {
            throw ParseError(section, "truncated at byte " + std::to_string(pos_));
        }
    }
    std::uint32_t u32(const char* section)
    {
        need(4, section);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_++]} << (8 * i);
        return v;
    }
    std::uint64_t u64(const char* section)
    {
        need(8, section);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_++]} << (8 * i);
        return v;
    }
    double f64(const char* section) { return std::bit_cast<double>(u64(section)); }
    std::string str(std::size_t n, const char* section)
    {
        need(n, section);
        std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                      bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    std::size_t pos() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return end_ - pos_; }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

} // namespace

std::vector<std::uint8_t> encode_checkpoint(const EchoPromptModel& model, const TrainConfig& config)
{
    TrainConfig echo = config;
    echo.model = model.config();
    nlohmann::ordered_json header;
    header["format"] = "echoprompt-checkpoint";
    header["text"] = {{"provider_id", model.text().provider_id}, {"class_names", model.text().class_names}};
    header["config"] = train_config_to_json(echo);
    const std::string json = header.dump();

    Writer w;
    w.bytes(kMagic, 4);
    w.u32(kCheckpointVersion);
    w.u64(json.size());
    w.bytes(json.data(), json.size());
    const auto tensors = model.named_tensors();
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        w.str32(name);
        w.u32(static_cast<std::uint32_t>(t->rank()));
        for (std::size_t d : t->shape()) {
            w.u64(d);
        }
        for (double v : t->values()) {
            w.f64(v);
        }
    }
    w.u64(checksum(w.out.data(), w.out.size()));
    return std::move(w.out);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes)
{
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw ParseError("magic", "not a checkpoint file");
    }
    if (bytes.size() < 16) {
        throw ParseError("header", "truncated");
    }
    const std::size_t body = bytes.size() - 8;
    std::uint64_t stored = 0;
    for (int i = 0; i < 8; ++i) {
        stored |= std::uint64_t{bytes[body + static_cast<std::size_t>(i)]} << (8 * i);
    }
    if (stored != checksum(bytes.data(), body)) {
        throw ParseError("checksum", "file is truncated or corrupt");
    }

    Reader r(bytes, body);
    r.str(4, "magic");
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw ParseError("version", "unsupported version " + std::to_string(version));
    }
    const std::uint64_t header_len = r.u64("header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(r.str(header_len, "header"));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("header", e.what());
    }

    Checkpoint ckpt;
    TextEmbeddingMatrix text;
    try {
        ckpt.config = train_config_from_json(header.at("config"));
        text.provider_id = header.at("text").at("provider_id").get<std::string>();
        text.class_names = header.at("text").at("class_names").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("header", e.what());
    } catch (const InvalidArgument& e) {
        throw ParseError("header", e.what());
    }

    std::map<std::string, Tensor> tensors;
    const std::uint32_t count = r.u32("tensors");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str(r.u32("tensor_name"), "tensor_name");
        const std::uint32_t rank = r.u32("tensor_shape");
        Shape shape(rank);
        for (auto& d : shape) {
            d = r.u64("tensor_shape");
        }
        const std::size_t n = shape_size(shape);
        if (r.remaining() / 8 < n) {
            throw ParseError("tensor_data", "tensor '" + name + "' is truncated");
        }
        std::vector<double> values(n);
        for (double& v : values) {
            v = r.f64("tensor_data");
        }
        tensors.emplace(name, Tensor(std::move(shape), std::move(values)));
    }
    if (r.remaining() != 0) {
        throw ParseError("tensors", "unexpected trailing bytes");
    }

    const auto text_it = tensors.find("frozen.text.rows");
    if (text_it == tensors.end()) {
        throw ParseError("tensors", "missing frozen.text.rows");
    }
    text.rows = text_it->second;
    text.normalized = true;
    ckpt.model = std::make_unique<EchoPromptModel>(ckpt.config.model, std::move(text));
    auto named = ckpt.model->named_tensors();
    if (named.size() != tensors.size()) {
        throw ParseError("tensors", "expected " + std::to_string(named.size()) + " tensors, found " +
                                        std::to_string(tensors.size()));
    }
    for (auto& [name, dst] : named) {
        const auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw ParseError("tensors", "missing tensor '" + name + "'");
        }
        if (it->second.shape() != dst->shape()) {
            throw ParseError("tensors", "tensor '" + name + "' has shape " + shape_string(it->second.shape()) +
                                            ", model expects " + shape_string(dst->shape()));
        }
        *dst = it->second;
    }
    return ckpt;
}

void save_checkpoint(const EchoPromptModel& model, const TrainConfig& config, const std::filesystem::path& path)
{
    const auto bytes = encode_checkpoint(model, config);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write checkpoint " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("failed writing checkpoint " + path.string());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

} // namespace echoprompt
