#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hl/numerics.hpp"
#include "hl/tokenizer.hpp"

namespace hl {

// One row per position, d_model columns.
using EmbeddingSequence = Tensor2D;

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t max_seq = 512;
    std::size_t vocab = vocab::kSize;
    std::size_t n_patches = 64; // P*P, row-major
    std::size_t n_queries = 8;  // Q-Former learnable queries
    std::size_t d_k = 16;
    std::size_t patch_dim = 32; // raw patch feature width
    float layernorm_eps = kLayerNormEps;

    std::size_t patch_grid() const;
    void validate() const; // throws ShapeError

    bool operator==(const ModelConfig&) const = default;
};

// Immutable-after-load set of named tensors. Vectors (gains, biases) are 1×n.
class WeightSet {
public:
    void set(std::string name, Tensor2D t) { tensors_[std::move(name)] = std::move(t); }
    const Tensor2D& at(const std::string& name) const;
    Tensor2D& mut(const std::string& name);
    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    const std::map<std::string, Tensor2D>& tensors() const { return tensors_; }

    // Throws FormatError naming the first missing or misshapen tensor.
    void validate(const ModelConfig& cfg) const;

    bool operator==(const WeightSet&) const = default;

private:
    std::map<std::string, Tensor2D> tensors_;
};

// Canonical tensor list (name, rows, cols) in initialization/file order.
struct TensorShape {
    std::string name;
    std::size_t rows;
    std::size_t cols;
};
std::vector<TensorShape> expected_shapes(const ModelConfig& cfg);

// xoshiro256** generator seeded through splitmix64.
class Xoshiro256 {
public:
    explicit Xoshiro256(std::uint64_t seed);
    std::uint64_t next();
    double uniform();  // [0, 1), 53-bit mantissa
    double normal();   // Box-Muller, standard normal

private:
    std::uint64_t s_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Gains = 1, biases = 0, every other tensor N(0, (0.02/sqrt(d_model))^2),
// drawn in expected_shapes() order from one xoshiro256** stream.
WeightSet seeded_init(const ModelConfig& cfg, std::uint64_t seed);

struct LoadedWeights {
    ModelConfig config;
    WeightSet weights;
};

// THW1 container: "THW1", u32 LE header length, JSON header, LE f32 payload.
void save_weights(const WeightSet& ws, const ModelConfig& cfg, const std::filesystem::path& path);
LoadedWeights load_weights(const std::filesystem::path& path);
LoadedWeights load_weights(const std::filesystem::path& path, const ModelConfig& expected);

// In-memory variants used by the file functions and by fuzz tests.
std::vector<std::uint8_t> serialize_weights(const WeightSet& ws, const ModelConfig& cfg);
LoadedWeights deserialize_weights(std::span<const std::uint8_t> bytes);

ModelConfig load_config(const std::filesystem::path& path);
void save_config(const ModelConfig& cfg, const std::filesystem::path& path);

// Per-layer cached keys and values for positions [0, length()).
class KVCache {
public:
    KVCache() = default;
    KVCache(std::size_t n_layers, std::size_t capacity, std::size_t d_model);

    std::size_t length() const { return length_; }
    std::size_t capacity() const { return capacity_; }
    std::size_t n_layers() const { return keys_.size(); }

    const Tensor2D& keys(std::size_t layer) const { return keys_[layer]; }
    const Tensor2D& values(std::size_t layer) const { return values_[layer]; }

    void clear() { length_ = 0; }

private:
    friend class Model;
    std::vector<Tensor2D> keys_;
    std::vector<Tensor2D> values_;
    std::size_t length_ = 0;
    std::size_t capacity_ = 0;
};

// Post-softmax attention probabilities for one head. Rows are queries at
// absolute positions query_offset + r, columns are key positions 0..cols.
struct AttentionEvent {
    std::size_t layer;
    std::size_t head;
    std::size_t query_offset;
    const Tensor2D& probs;
};
using AttentionObserver = std::function<void(const AttentionEvent&)>;

class Model {
public:
    Model(ModelConfig cfg, WeightSet weights);
    Model(ModelConfig cfg, std::shared_ptr<const WeightSet> weights);

    const ModelConfig& config() const { return cfg_; }
    const WeightSet& weights() const { return *weights_; }

    KVCache new_cache() const;

    // f(x_i): raw token-table rows, no positions.
    EmbeddingSequence token_embeddings(std::span<const TokenId> tokens) const;
    // Adds positional rows start_pos.. to x in place.
    void add_positions(EmbeddingSequence& x, std::size_t start_pos) const;
    // f(x_i) + positional(i), positions starting at 0.
    EmbeddingSequence embed(std::span<const TokenId> tokens) const;

    // Runs new positions through every layer with causal attention over the
    // cache plus the new rows, appending their keys/values to the cache.
    // attn_bias is indexed by key position and must span the whole context
    // (cache length + new rows); an empty span means no bias.
    LogitVector forward_step(KVCache& cache, const EmbeddingSequence& new_embeddings,
                             std::span<const float> attn_bias = {},
                             const AttentionObserver* observer = nullptr) const;

    // P×P grid (rows = patches in row-major order) → projected embeddings.
    EmbeddingSequence project_patches(const Tensor2D& patches) const;

    // Single cross-attention layer from the learnable queries onto the patch
    // features, with log(beta_q) added to the scaled scores of masked patches.
    EmbeddingSequence qformer_forward(const Tensor2D& patch_features,
                                      std::span<const std::uint8_t> patch_mask, float beta_q,
                                      const AttentionObserver* observer = nullptr) const;

private:
    ModelConfig cfg_;
    std::shared_ptr<const WeightSet> weights_;
    // Cached pointers into weights_, resolved once.
    struct Layer {
        const Tensor2D *ln1_g, *ln1_b, *wq, *wk, *wv, *wo, *ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
    };
    std::vector<Layer> layers_;
};

} // namespace hl
