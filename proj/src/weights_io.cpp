#include <cstring>
#include <fstream>
#include <iterator>
#include <string_view>

#include <zlib.h>

#include "hl/json_io.hpp"
#include "hl/model.hpp"

namespace hl {

namespace {

constexpr char kMagic[4] = {'T', 'H', 'W', '1'};
constexpr const char* kConfigKey = "__config__";
constexpr const char* kCrcKey = "__crc32__";

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    put_u32(out, bits);
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

float get_f32(const std::uint8_t* p) {
    const std::uint32_t bits = get_u32(p);
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
}

// The only header a writer may produce for cfg. Readers compare byte for
// byte, so any corruption that still parses is rejected too.
std::string canonical_header(const ModelConfig& cfg) {
    nlohmann::json header = nlohmann::json::object();
    header[kConfigKey] = cfg;
    std::uint64_t offset = 0;
    for (const auto& s : expected_shapes(cfg)) {
        header[s.name] = {{"shape", {s.rows, s.cols}}, {"offset", offset}};
        offset += static_cast<std::uint64_t>(s.rows) * s.cols * 4;
    }
    // CRC-32 of the header text without this field.
    const std::string body = header.dump();
    header[kCrcKey] = crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
    return header.dump();
}

} // namespace

std::vector<std::uint8_t> serialize_weights(const WeightSet& ws, const ModelConfig& cfg) {
    ws.validate(cfg);
    const auto shapes = expected_shapes(cfg);
    const std::string text = canonical_header(cfg);
    std::uint64_t offset = 0;
    for (const auto& s : shapes) offset += static_cast<std::uint64_t>(s.rows) * s.cols * 4;
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    out.reserve(out.size() + offset);
    for (const auto& s : shapes)
        for (float f : ws.at(s.name).data()) put_f32(out, f);
    return out;
}

LoadedWeights deserialize_weights(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError("bad magic: not a THW1 weight file");
    }
    const std::uint32_t header_len = get_u32(bytes.data() + 4);
    if (bytes.size() - 8 < header_len) throw FormatError("truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed header JSON: ") + e.what());
    }
    if (!header.is_object() || !header.contains(kConfigKey)) throw FormatError("header missing " + std::string(kConfigKey));

    LoadedWeights out;
    try {
        out.config = header.at(kConfigKey).get<ModelConfig>();
        out.config.validate();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad embedded config: ") + e.what());
    } catch (const ShapeError& e) {
        throw FormatError(std::string("bad embedded config: ") + e.what());
    }

    const auto shapes = expected_shapes(out.config);
    if (header.size() != shapes.size() + 2) throw FormatError("header tensor count does not match config");
    const std::span<const std::uint8_t> payload = bytes.subspan(8 + header_len);
    std::uint64_t expected_offset = 0;
    for (const auto& s : shapes) {
        if (!header.contains(s.name)) throw FormatError("missing tensor '" + s.name + "'");
        const auto& entry = header.at(s.name);
        std::vector<std::uint64_t> shape;
        std::uint64_t offset = 0;
        try {
            shape = entry.at("shape").get<std::vector<std::uint64_t>>();
            offset = entry.at("offset").get<std::uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("tensor '" + s.name + "': " + e.what());
        }
        if (entry.size() != 2 || shape.size() != 2 || shape[0] != s.rows || shape[1] != s.cols) {
            throw FormatError("tensor '" + s.name + "': shape does not match config");
        }
        // Tensors are packed contiguously in canonical order.
        if (offset != expected_offset) throw FormatError("tensor '" + s.name + "': unexpected offset");
        const std::uint64_t nbytes = static_cast<std::uint64_t>(s.rows) * s.cols * 4;
        if (offset + nbytes > payload.size()) throw FormatError("tensor '" + s.name + "': truncated payload");
        Tensor2D t(s.rows, s.cols);
        const std::uint8_t* p = payload.data() + offset;
        for (auto& v : t.data()) {
            v = get_f32(p);
            p += 4;
        }
        out.weights.set(s.name, std::move(t));
        expected_offset += nbytes;
    }
    if (expected_offset != payload.size()) throw FormatError("trailing bytes after payload");
    const std::string_view raw(reinterpret_cast<const char*>(bytes.data() + 8), header_len);
    if (raw != canonical_header(out.config)) throw FormatError("header is not in canonical form");
    out.weights.validate(out.config);
    return out;
}

void save_weights(const WeightSet& ws, const ModelConfig& cfg, const std::filesystem::path& path) {
    const auto bytes = serialize_weights(ws, cfg);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + path.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("short write to '" + path.string() + "'");
}

LoadedWeights load_weights(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open weight file '" + path.string() + "'");
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_weights(bytes);
}

LoadedWeights load_weights(const std::filesystem::path& path, const ModelConfig& expected) {
    auto loaded = load_weights(path);
    if (!(loaded.config == expected)) throw FormatError("weight file config does not match supplied config");
    return loaded;
}

ModelConfig load_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open config '" + path.string() + "'");
    try {
        auto cfg = nlohmann::json::parse(f).get<ModelConfig>();
        cfg.validate();
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config '" + path.string() + "': " + e.what());
    } catch (const ShapeError& e) {
        throw FormatError("config '" + path.string() + "': " + e.what());
    }
}

void save_config(const ModelConfig& cfg, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot open '" + path.string() + "' for writing");
    f << nlohmann::json(cfg).dump(2) << '\n';
}

} // namespace hl
