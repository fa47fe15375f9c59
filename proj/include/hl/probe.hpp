#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "hl/guidance.hpp"
#include "hl/model.hpp"
#include "json.hpp"

namespace hl {

// Captured attention of one decode (conditional branch). Maps are square
// T×T over every processed position, rows zero beyond their causal support.
//
// "Generated rows" are the query rows that chose a generated token:
// [context_len - 1, context_len - 1 + generated). "Context columns" are
// [0, context_len).
struct AttentionSnapshot {
    std::size_t context_len = 0;
    std::size_t generated = 0;
    std::vector<std::size_t> layers;         // captured layer indices
    std::size_t n_heads = 0;
    std::vector<std::vector<Tensor2D>> maps; // [layer slot][head]
    Tensor2D average;                        // mean over captured layers and heads
    std::vector<std::uint8_t> mask;          // highlight bits over the context
    bool exclude_sink = true;

    std::size_t length() const { return average.rows(); }
    std::size_t first_generated_row() const { return context_len == 0 ? 0 : context_len - 1; }
};

// Attaches to a decode as an observer. Recording never alters the forward
// pass; it only copies the probabilities it is shown.
class ProbeRecorder {
public:
    // Empty selection captures every layer.
    ProbeRecorder(const ModelConfig& cfg, std::vector<std::size_t> layers = {});

    const AttentionObserver& observer() const { return observer_; }
    AttentionSnapshot snapshot(std::size_t context_len, std::size_t generated,
                               std::span<const std::uint8_t> mask) const;

private:
    void record(const AttentionEvent& ev);

    std::vector<std::size_t> layers_;
    std::vector<int> slot_of_layer_;
    std::size_t n_heads_;
    // rows_[slot][head][position] = probabilities over keys 0..position
    std::vector<std::vector<std::vector<std::vector<float>>>> rows_;
    AttentionObserver observer_;
};

struct ProbedGeneration {
    GenerationResult result;
    AttentionSnapshot snapshot;
};

ProbedGeneration decode_with_probe(const Model& model, const DecodeInput& input, const GuidanceConfig& cfg,
                                   bool vanilla = false, std::vector<std::size_t> layers = {},
                                   const DecodeHooks& hooks = {});

// Mean over layers and heads of the given maps.
Tensor2D average_maps(const std::vector<std::vector<Tensor2D>>& maps);

struct BandGap {
    double gx = 0.0; // summed |horizontal first differences|
    double gy = 0.0; // summed |vertical first differences|
    // gx / gy; infinite when gy == 0 < gx, NaN when both are zero.
    double ratio() const;
};

// Differences taken over the generated-rows × context-columns block; column
// 0 is dropped when exclude_sink. Requires at least two generated rows.
BandGap band_gap(const Tensor2D& map, std::size_t context_len, bool exclude_sink = true);
BandGap band_gap(const AttentionSnapshot& snap);

struct Contribution {
    std::vector<double> per_row;
    double mean = 0.0;
};

// Per generated row: attention on highlighted context columns divided by
// attention on all context columns.
Contribution contribution(const Tensor2D& map, std::size_t context_len, std::span<const std::uint8_t> mask);
Contribution contribution(const AttentionSnapshot& snap);
// Same, on a single captured layer (averaged over its heads).
Contribution layer_contribution(const AttentionSnapshot& snap, std::size_t layer_slot);

// Mean-pools to at most max_dim × max_dim and renormalizes every nonzero row to 1.
Tensor2D downsample_map(const Tensor2D& map, std::size_t max_dim = 64);

// Binary export: "HLS1", u32 LE header length, JSON header, LE f32 payload
// (same layout as the weight container).
void write_snapshot(const AttentionSnapshot& snap, const std::filesystem::path& path);
AttentionSnapshot read_snapshot(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_snapshot(const AttentionSnapshot& snap);
AttentionSnapshot deserialize_snapshot(std::span<const std::uint8_t> bytes);

// Light JSON form: {"context_len", "generated", "mask", "map"} with the
// averaged map only. Used for fixtures and heatmap clients.
nlohmann::json snapshot_to_json(const AttentionSnapshot& snap);
AttentionSnapshot snapshot_from_json(const nlohmann::json& j);

// Loads either form, sniffing the magic.
AttentionSnapshot load_snapshot_any(const std::filesystem::path& path);

// Summary used by the CLI report and the attention endpoint.
nlohmann::json probe_report(const AttentionSnapshot& snap);

} // namespace hl
