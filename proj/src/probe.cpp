#include "hl/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "hl/json_io.hpp"

namespace hl {

using nlohmann::json;

ProbeRecorder::ProbeRecorder(const ModelConfig& cfg, std::vector<std::size_t> layers)
    : layers_(std::move(layers)), slot_of_layer_(cfg.n_layers, -1), n_heads_(cfg.n_heads) {
    if (layers_.empty()) {
        for (std::size_t l = 0; l < cfg.n_layers; ++l) layers_.push_back(l);
    }
    for (std::size_t s = 0; s < layers_.size(); ++s) {
        if (layers_[s] >= cfg.n_layers) throw BoundsError("probe layer " + std::to_string(layers_[s]) + " out of range");
        slot_of_layer_[layers_[s]] = static_cast<int>(s);
    }
    rows_.assign(layers_.size(), std::vector<std::vector<std::vector<float>>>(n_heads_));
    observer_ = [this](const AttentionEvent& ev) { record(ev); };
}

void ProbeRecorder::record(const AttentionEvent& ev) {
    if (ev.layer >= slot_of_layer_.size()) return;
    const int slot = slot_of_layer_[ev.layer];
    if (slot < 0) return;
    auto& rows = rows_[static_cast<std::size_t>(slot)][ev.head];
    for (std::size_t r = 0; r < ev.probs.rows(); ++r) {
        const std::size_t pos = ev.query_offset + r;
        if (rows.size() <= pos) rows.resize(pos + 1);
        const auto src = ev.probs.row(r);
        rows[pos].assign(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(pos + 1));
    }
}

Tensor2D average_maps(const std::vector<std::vector<Tensor2D>>& maps) {
    if (maps.empty() || maps.front().empty()) return {};
    const std::size_t t = maps.front().front().rows();
    Tensor2D avg(t, maps.front().front().cols());
    std::size_t count = 0;
    for (const auto& layer : maps)
        for (const auto& head : layer) {
            add_inplace(avg, head);
            ++count;
        }
    scale_inplace(avg.data(), 1.0f / static_cast<float>(count));
    return avg;
}

AttentionSnapshot ProbeRecorder::snapshot(std::size_t context_len, std::size_t generated,
                                          std::span<const std::uint8_t> mask) const {
    AttentionSnapshot snap;
    snap.context_len = context_len;
    snap.generated = generated;
    snap.layers = layers_;
    snap.n_heads = n_heads_;
    snap.mask.assign(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(std::min(mask.size(), context_len)));
    std::size_t t = 0;
    for (const auto& layer : rows_)
        for (const auto& head : layer) t = std::max(t, head.size());
    snap.maps.resize(layers_.size());
    for (std::size_t s = 0; s < layers_.size(); ++s) {
        for (std::size_t h = 0; h < n_heads_; ++h) {
            Tensor2D m(t, t);
            const auto& rows = rows_[s][h];
            for (std::size_t r = 0; r < rows.size(); ++r)
                std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
            snap.maps[s].push_back(std::move(m));
        }
    }
    snap.average = average_maps(snap.maps);
    return snap;
}

ProbedGeneration decode_with_probe(const Model& model, const DecodeInput& input, const GuidanceConfig& cfg,
                                   bool vanilla, std::vector<std::size_t> layers, const DecodeHooks& hooks) {
    ProbeRecorder rec(model.config(), std::move(layers));
    DecodeHooks h = hooks;
    h.cond_observer = &rec.observer();
    ProbedGeneration out;
    out.result = vanilla ? decode_vanilla(model, input, cfg, h) : decode(model, input, cfg, h);
    out.snapshot = rec.snapshot(input.tokens.size(), out.result.steps.size(), input.mask.bits());
    return out;
}

double BandGap::ratio() const {
    if (gy == 0.0) return gx == 0.0 ? std::numeric_limits<double>::quiet_NaN() : std::numeric_limits<double>::infinity();
    return gx / gy;
}

namespace {

struct Block {
    std::size_t r0, r1, c0, c1;
};

Block generated_block(const Tensor2D& map, std::size_t context_len, std::size_t min_rows) {
    if (context_len == 0 || context_len > map.cols()) throw ShapeError("context length outside attention map");
    const std::size_t r0 = context_len - 1;
    if (map.rows() < r0 + min_rows) {
        throw ShapeError("attention map needs at least " + std::to_string(min_rows) + " generated rows");
    }
    return {r0, map.rows(), 0, context_len};
}

} // namespace

BandGap band_gap(const Tensor2D& map, std::size_t context_len, bool exclude_sink) {
    Block b = generated_block(map, context_len, 2);
    if (exclude_sink) b.c0 = 1;
    BandGap g;
    for (std::size_t r = b.r0; r < b.r1; ++r)
        for (std::size_t c = b.c0; c + 1 < b.c1; ++c) g.gx += std::fabs(static_cast<double>(map(r, c + 1)) - map(r, c));
    for (std::size_t r = b.r0; r + 1 < b.r1; ++r)
        for (std::size_t c = b.c0; c < b.c1; ++c) g.gy += std::fabs(static_cast<double>(map(r + 1, c)) - map(r, c));
    return g;
}

BandGap band_gap(const AttentionSnapshot& snap) {
    return band_gap(snap.average, snap.context_len, snap.exclude_sink);
}

Contribution contribution(const Tensor2D& map, std::size_t context_len, std::span<const std::uint8_t> mask) {
    const Block b = generated_block(map, context_len, 1);
    if (mask.size() < context_len) throw ShapeError("mask shorter than context");
    Contribution out;
    for (std::size_t r = b.r0; r < b.r1; ++r) {
        double hi = 0.0, all = 0.0;
        for (std::size_t c = 0; c < context_len; ++c) {
            const double p = map(r, c);
            all += p;
            if (mask[c]) hi += p;
        }
        out.per_row.push_back(all > 0.0 ? hi / all : 0.0);
    }
    double sum = 0.0;
    for (double v : out.per_row) sum += v;
    out.mean = out.per_row.empty() ? 0.0 : sum / static_cast<double>(out.per_row.size());
    return out;
}

Contribution contribution(const AttentionSnapshot& snap) {
    return contribution(snap.average, snap.context_len, snap.mask);
}

Contribution layer_contribution(const AttentionSnapshot& snap, std::size_t layer_slot) {
    if (layer_slot >= snap.maps.size()) throw BoundsError("layer slot out of range");
    const Tensor2D avg = average_maps({snap.maps[layer_slot]});
    return contribution(avg, snap.context_len, snap.mask);
}

Tensor2D downsample_map(const Tensor2D& map, std::size_t max_dim) {
    if (max_dim == 0) throw ShapeError("max_dim must be positive");
    const std::size_t out_r = std::min(map.rows(), max_dim), out_c = std::min(map.cols(), max_dim);
    Tensor2D out(out_r, out_c);
    for (std::size_t i = 0; i < out_r; ++i) {
        const std::size_t r0 = i * map.rows() / out_r, r1 = (i + 1) * map.rows() / out_r;
        for (std::size_t j = 0; j < out_c; ++j) {
            const std::size_t c0 = j * map.cols() / out_c, c1 = (j + 1) * map.cols() / out_c;
            double sum = 0.0;
            for (std::size_t r = r0; r < r1; ++r)
                for (std::size_t c = c0; c < c1; ++c) sum += map(r, c);
            out(i, j) = static_cast<float>(sum / static_cast<double>((r1 - r0) * (c1 - c0)));
        }
        double row_sum = 0.0;
        for (float v : out.row(i)) row_sum += v;
        if (row_sum > 0.0)
            for (auto& v : out.row(i)) v = static_cast<float>(v / row_sum);
    }
    return out;
}

namespace {

constexpr char kSnapMagic[4] = {'H', 'L', 'S', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string map_name(std::size_t slot, std::size_t head) {
    return "L" + std::to_string(slot) + ".H" + std::to_string(head);
}

} // namespace

std::vector<std::uint8_t> serialize_snapshot(const AttentionSnapshot& snap) {
    std::vector<const Tensor2D*> tensors{&snap.average};
    json header;
    header["__snapshot__"] = {{"context_len", snap.context_len}, {"generated", snap.generated},
                              {"layers", snap.layers},           {"n_heads", snap.n_heads},
                              {"mask", snap.mask},               {"exclude_sink", snap.exclude_sink}};
    std::uint64_t offset = 0;
    auto add = [&](const std::string& name, const Tensor2D& t) {
        header[name] = {{"shape", {t.rows(), t.cols()}}, {"offset", offset}};
        offset += static_cast<std::uint64_t>(t.size()) * 4;
    };
    add("average", snap.average);
    for (std::size_t s = 0; s < snap.maps.size(); ++s)
        for (std::size_t h = 0; h < snap.maps[s].size(); ++h) {
            add(map_name(s, h), snap.maps[s][h]);
            tensors.push_back(&snap.maps[s][h]);
        }
    const std::string text = header.dump();
    std::vector<std::uint8_t> out(kSnapMagic, kSnapMagic + 4);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    for (const Tensor2D* t : tensors)
        for (float f : t->data()) {
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_u32(out, bits);
        }
    return out;
}

AttentionSnapshot deserialize_snapshot(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kSnapMagic, 4) != 0) throw FormatError("not an HLS1 snapshot");
    const std::uint32_t hlen = get_u32(bytes.data() + 4);
    if (bytes.size() - 8 < hlen) throw FormatError("truncated snapshot header");
    AttentionSnapshot snap;
    try {
        const json header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + hlen);
        const auto& meta = header.at("__snapshot__");
        meta.at("context_len").get_to(snap.context_len);
        meta.at("generated").get_to(snap.generated);
        meta.at("layers").get_to(snap.layers);
        meta.at("n_heads").get_to(snap.n_heads);
        meta.at("mask").get_to(snap.mask);
        meta.at("exclude_sink").get_to(snap.exclude_sink);
        const auto payload = bytes.subspan(8 + hlen);
        auto load = [&](const std::string& name) {
            const auto& e = header.at(name);
            const auto shape = e.at("shape").get<std::vector<std::size_t>>();
            const auto off = e.at("offset").get<std::uint64_t>();
            if (shape.size() != 2) throw FormatError("tensor '" + name + "': bad shape");
            const std::uint64_t n = static_cast<std::uint64_t>(shape[0]) * shape[1];
            if (off + n * 4 > payload.size()) throw FormatError("tensor '" + name + "': truncated payload");
            Tensor2D t(shape[0], shape[1]);
            for (std::size_t i = 0; i < n; ++i) {
                const std::uint32_t bits = get_u32(payload.data() + off + 4 * i);
                std::memcpy(&t.data()[i], &bits, 4);
            }
            return t;
        };
        snap.average = load("average");
        snap.maps.resize(snap.layers.size());
        for (std::size_t s = 0; s < snap.layers.size(); ++s)
            for (std::size_t h = 0; h < snap.n_heads; ++h) snap.maps[s].push_back(load(map_name(s, h)));
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed snapshot: ") + e.what());
    }
    return snap;
}

void write_snapshot(const AttentionSnapshot& snap, const std::filesystem::path& path) {
    const auto bytes = serialize_snapshot(snap);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + path.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

AttentionSnapshot read_snapshot(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open snapshot '" + path.string() + "'");
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_snapshot(bytes);
}

json snapshot_to_json(const AttentionSnapshot& snap) {
    json rows = json::array();
    for (std::size_t r = 0; r < snap.average.rows(); ++r)
        rows.push_back(std::vector<float>(snap.average.row(r).begin(), snap.average.row(r).end()));
    return json{{"context_len", snap.context_len}, {"generated", snap.generated}, {"mask", snap.mask},
                {"exclude_sink", snap.exclude_sink}, {"map", rows}};
}

AttentionSnapshot snapshot_from_json(const json& j) {
    AttentionSnapshot snap;
    try {
        j.at("context_len").get_to(snap.context_len);
        snap.average = Tensor2D::from_rows(j.at("map").get<std::vector<std::vector<float>>>());
        if (snap.context_len == 0 || snap.average.rows() + 1 < snap.context_len) {
            throw FormatError("map has fewer rows than the context");
        }
        snap.generated = j.value("generated", snap.average.rows() + 1 - snap.context_len);
        snap.mask = j.value("mask", std::vector<std::uint8_t>(snap.context_len, 0));
        snap.exclude_sink = j.value("exclude_sink", true);
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed snapshot JSON: ") + e.what());
    }
    return snap;
}

AttentionSnapshot load_snapshot_any(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open snapshot '" + path.string() + "'");
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), kSnapMagic, 4) == 0) return deserialize_snapshot(bytes);
    try {
        return snapshot_from_json(json::parse(bytes.begin(), bytes.end()));
    } catch (const json::exception& e) {
        throw FormatError(std::string("snapshot is neither HLS1 nor JSON: ") + e.what());
    }
}

json probe_report(const AttentionSnapshot& snap) {
    json out{{"context_len", snap.context_len}, {"generated", snap.generated}};
    if (snap.average.rows() >= snap.context_len + 1) {
        const BandGap g = band_gap(snap);
        out["gx"] = g.gx;
        out["gy"] = g.gy;
        const double ratio = g.ratio();
        out["ratio"] = std::isfinite(ratio) ? json(ratio) : json(nullptr);
    } else {
        out["gx"] = nullptr;
        out["gy"] = nullptr;
        out["ratio"] = nullptr;
    }
    if (snap.average.rows() >= snap.context_len && snap.mask.size() >= snap.context_len) {
        const Contribution c = contribution(snap);
        out["contribution"] = c.per_row;
        out["contribution_mean"] = c.mean;
    }
    return out;
}

} // namespace hl
