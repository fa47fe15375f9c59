#include "hl/model.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "hl/activation.hpp"

namespace hl {

std::size_t ModelConfig::patch_grid() const {
    const auto p = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n_patches))));
    return p;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw ShapeError("model config: " + what); };
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_seq == 0) fail("zero dimension");
    if (d_model % n_heads != 0) fail("d_model not divisible by n_heads");
    if (d_k != d_model / n_heads) fail("d_k must equal d_model / n_heads");
    if (vocab != vocab::kSize) fail("vocab must be " + std::to_string(vocab::kSize));
    if (n_patches == 0 || patch_grid() * patch_grid() != n_patches) fail("n_patches must be a square");
    if (n_queries == 0 || patch_dim == 0) fail("zero vision dimension");
    if (layernorm_eps != kLayerNormEps) fail("layernorm_eps is fixed at 1e-5");
}

const Tensor2D& WeightSet::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw FormatError("missing tensor '" + name + "'");
    return it->second;
}

Tensor2D& WeightSet::mut(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw FormatError("missing tensor '" + name + "'");
    return it->second;
}

void WeightSet::validate(const ModelConfig& cfg) const {
    const auto shapes = expected_shapes(cfg);
    for (const auto& s : shapes) {
        const auto& t = at(s.name);
        if (t.rows() != s.rows || t.cols() != s.cols) {
            throw FormatError("tensor '" + s.name + "' has shape [" + std::to_string(t.rows()) + ", " +
                              std::to_string(t.cols()) + "], expected [" + std::to_string(s.rows) +
                              ", " + std::to_string(s.cols) + "]");
        }
        for (float v : t.data())
            if (!std::isfinite(v)) throw FormatError("tensor '" + s.name + "' has non-finite values");
    }
    if (tensors_.size() != shapes.size()) throw FormatError("unexpected extra tensors");
}

std::vector<TensorShape> expected_shapes(const ModelConfig& cfg) {
    const std::size_t d = cfg.d_model;
    std::vector<TensorShape> s{
        {"tok_emb", cfg.vocab, d},
        {"pos_emb", cfg.max_seq, d},
    };
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        s.push_back({p + "ln1.g", 1, d});
        s.push_back({p + "ln1.b", 1, d});
        s.push_back({p + "attn.wq", d, d});
        s.push_back({p + "attn.wk", d, d});
        s.push_back({p + "attn.wv", d, d});
        s.push_back({p + "attn.wo", d, d});
        s.push_back({p + "ln2.g", 1, d});
        s.push_back({p + "ln2.b", 1, d});
        s.push_back({p + "mlp.w1", d, cfg.d_ff});
        s.push_back({p + "mlp.b1", 1, cfg.d_ff});
        s.push_back({p + "mlp.w2", cfg.d_ff, d});
        s.push_back({p + "mlp.b2", 1, d});
    }
    s.push_back({"ln_f.g", 1, d});
    s.push_back({"ln_f.b", 1, d});
    s.push_back({"head", d, cfg.vocab});
    s.push_back({"vision.proj", cfg.patch_dim, d});
    s.push_back({"qformer.queries", cfg.n_queries, d});
    s.push_back({"qformer.wq", d, d});
    s.push_back({"qformer.wk", cfg.patch_dim, d});
    s.push_back({"qformer.wv", cfg.patch_dim, d});
    return s;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

} // namespace

Xoshiro256::Xoshiro256(std::uint64_t seed) {
    for (auto& w : s_) w = splitmix64(seed);
}

std::uint64_t Xoshiro256::next() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Xoshiro256::uniform() {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
}

double Xoshiro256::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

WeightSet seeded_init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Xoshiro256 rng(seed);
    const double scale = 0.02 / std::sqrt(static_cast<double>(cfg.d_model));
    WeightSet ws;
    for (const auto& s : expected_shapes(cfg)) {
        Tensor2D t(s.rows, s.cols);
        if (ends_with(s.name, ".g")) {
            t = Tensor2D(s.rows, s.cols, 1.0f);
        } else if (ends_with(s.name, ".b") || ends_with(s.name, ".b1") || ends_with(s.name, ".b2")) {
            // zeros
        } else {
            for (auto& v : t.data()) v = static_cast<float>(rng.normal() * scale);
        }
        ws.set(s.name, std::move(t));
    }
    return ws;
}

KVCache::KVCache(std::size_t n_layers, std::size_t capacity, std::size_t d_model)
    : capacity_(capacity) {
    keys_.assign(n_layers, Tensor2D(capacity, d_model));
    values_.assign(n_layers, Tensor2D(capacity, d_model));
}

Model::Model(ModelConfig cfg, WeightSet weights)
    : Model(cfg, std::make_shared<const WeightSet>(std::move(weights))) {}

Model::Model(ModelConfig cfg, std::shared_ptr<const WeightSet> weights)
    : cfg_(cfg), weights_(std::move(weights)) {
    cfg_.validate();
    weights_->validate(cfg_);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        const auto& w = *weights_;
        layers_.push_back({&w.at(p + "ln1.g"), &w.at(p + "ln1.b"), &w.at(p + "attn.wq"),
                           &w.at(p + "attn.wk"), &w.at(p + "attn.wv"), &w.at(p + "attn.wo"),
                           &w.at(p + "ln2.g"), &w.at(p + "ln2.b"), &w.at(p + "mlp.w1"),
                           &w.at(p + "mlp.b1"), &w.at(p + "mlp.w2"), &w.at(p + "mlp.b2")});
    }
}

KVCache Model::new_cache() const {
    return {cfg_.n_layers, cfg_.max_seq, cfg_.d_model};
}

EmbeddingSequence Model::token_embeddings(std::span<const TokenId> tokens) const {
    const auto& table = weights_->at("tok_emb");
    EmbeddingSequence out(tokens.size(), cfg_.d_model);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const TokenId id = tokens[i];
        if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab) {
            throw VocabError("token id " + std::to_string(id) + " outside vocabulary");
        }
        const auto src = table.row(static_cast<std::size_t>(id));
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

void Model::add_positions(EmbeddingSequence& x, std::size_t start_pos) const {
    if (start_pos + x.rows() > cfg_.max_seq) {
        throw CapacityError("positions up to " + std::to_string(start_pos + x.rows()) +
                            " exceed max_seq " + std::to_string(cfg_.max_seq));
    }
    const auto& pos = weights_->at("pos_emb");
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto row = x.row(i);
        const auto p = pos.row(start_pos + i);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += p[c];
    }
}

EmbeddingSequence Model::embed(std::span<const TokenId> tokens) const {
    auto x = token_embeddings(tokens);
    add_positions(x, 0);
    return x;
}

LogitVector Model::forward_step(KVCache& cache, const EmbeddingSequence& new_embeddings,
                                std::span<const float> attn_bias,
                                const AttentionObserver* observer) const {
    const std::size_t n_new = new_embeddings.rows();
    if (n_new == 0) throw ShapeError("forward_step with no new positions");
    if (new_embeddings.cols() != cfg_.d_model) throw ShapeError("embedding width != d_model");
    if (cache.n_layers() != cfg_.n_layers || cache.capacity() > cfg_.max_seq) {
        throw ShapeError("cache does not belong to this model");
    }
    const std::size_t past = cache.length();
    const std::size_t total = past + n_new;
    if (total > cache.capacity()) {
        throw CapacityError("context of " + std::to_string(total) + " positions exceeds max_seq " +
                            std::to_string(cache.capacity()));
    }
    if (!attn_bias.empty() && attn_bias.size() != total) {
        throw ShapeError("attention bias length " + std::to_string(attn_bias.size()) +
                         " != context length " + std::to_string(total));
    }

    const std::size_t d = cfg_.d_model, dk = cfg_.d_k;
    const float inv_sqrt_dk = 1.0f / std::sqrt(static_cast<float>(dk));
    Tensor2D x = new_embeddings;

    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        const Layer& L = layers_[l];
        const Tensor2D h = layernorm_rows(x, L.ln1_g->row(0), L.ln1_b->row(0), cfg_.layernorm_eps);
        const Tensor2D q = matmul(h, *L.wq);
        const Tensor2D k = matmul(h, *L.wk);
        const Tensor2D v = matmul(h, *L.wv);
        Tensor2D& ck = cache.keys_[l];
        Tensor2D& cv = cache.values_[l];
        for (std::size_t i = 0; i < n_new; ++i) {
            std::copy(k.row(i).begin(), k.row(i).end(), ck.row(past + i).begin());
            std::copy(v.row(i).begin(), v.row(i).end(), cv.row(past + i).begin());
        }

        Tensor2D attn_out(n_new, d);
        Tensor2D qh(n_new, dk), kh(total, dk);
        for (std::size_t head = 0; head < cfg_.n_heads; ++head) {
            const std::size_t off = head * dk;
            for (std::size_t i = 0; i < n_new; ++i)
                for (std::size_t c = 0; c < dk; ++c) qh(i, c) = q(i, off + c);
            for (std::size_t j = 0; j < total; ++j)
                for (std::size_t c = 0; c < dk; ++c) kh(j, c) = ck(j, off + c);
            Tensor2D scores = matmul_transposed(qh, kh);
            for (auto& s : scores.data()) s *= inv_sqrt_dk;
            const Tensor2D probs = apply_bias(scores, attn_bias, /*causal=*/true, past);
            if (observer && *observer) (*observer)(AttentionEvent{l, head, past, probs});
            for (std::size_t i = 0; i < n_new; ++i) {
                const std::size_t support = past + i + 1;
                for (std::size_t j = 0; j < support; ++j) {
                    const float p = probs(i, j);
                    const auto vrow = cv.row(j);
                    for (std::size_t c = 0; c < dk; ++c) attn_out(i, off + c) += p * vrow[off + c];
                }
            }
        }
        add_inplace(x, matmul(attn_out, *L.wo));

        const Tensor2D h2 = layernorm_rows(x, L.ln2_g->row(0), L.ln2_b->row(0), cfg_.layernorm_eps);
        Tensor2D ff = matmul(h2, *L.w1);
        add_row_bias(ff, L.b1->row(0));
        for (auto& val : ff.data()) val = gelu(val);
        Tensor2D ff2 = matmul(ff, *L.w2);
        add_row_bias(ff2, L.b2->row(0));
        add_inplace(x, ff2);
    }
    cache.length_ = total;

    const auto last = layernorm(x.row(n_new - 1), weights_->at("ln_f.g").row(0),
                                weights_->at("ln_f.b").row(0), cfg_.layernorm_eps);
    const Tensor2D last_row(1, d, last);
    const Tensor2D logits = matmul(last_row, weights_->at("head"));
    return logits.data();
}

EmbeddingSequence Model::project_patches(const Tensor2D& patches) const {
    if (patches.rows() != cfg_.n_patches || patches.cols() != cfg_.patch_dim) {
        throw ShapeError("patch grid is " + std::to_string(patches.rows()) + "x" +
                         std::to_string(patches.cols()) + ", expected " + std::to_string(cfg_.n_patches) +
                         "x" + std::to_string(cfg_.patch_dim));
    }
    return matmul(patches, weights_->at("vision.proj"));
}

EmbeddingSequence Model::qformer_forward(const Tensor2D& patch_features,
                                         std::span<const std::uint8_t> patch_mask, float beta_q,
                                         const AttentionObserver* observer) const {
    if (patch_features.cols() != cfg_.patch_dim || patch_features.rows() == 0) {
        throw ShapeError("patch features must be N x " + std::to_string(cfg_.patch_dim));
    }
    const std::size_t n = patch_features.rows();
    if (!patch_mask.empty() && patch_mask.size() != n) {
        throw ShapeError("patch mask length " + std::to_string(patch_mask.size()) + " != " +
                         std::to_string(n) + " patches");
    }
    if (!(beta_q > 0.0f) || !std::isfinite(beta_q)) throw ParamError("beta_q must be positive and finite");

    // w: m broadcast over heads and queries; added after the 1/sqrt(d_k) scaling.
    std::vector<float> bias;
    if (!patch_mask.empty()) {
        const float lb = std::log(beta_q);
        bias.resize(n, 0.0f);
        for (std::size_t i = 0; i < n; ++i)
            if (patch_mask[i]) bias[i] = lb;
    }

    const Tensor2D q = matmul(weights_->at("qformer.queries"), weights_->at("qformer.wq"));
    const Tensor2D k = matmul(patch_features, weights_->at("qformer.wk"));
    const Tensor2D v = matmul(patch_features, weights_->at("qformer.wv"));
    const std::size_t m = q.rows(), dk = cfg_.d_k;
    const float inv_sqrt_dk = 1.0f / std::sqrt(static_cast<float>(dk));

    EmbeddingSequence out(m, cfg_.d_model);
    Tensor2D qh(m, dk), kh(n, dk);
    for (std::size_t head = 0; head < cfg_.n_heads; ++head) {
        const std::size_t off = head * dk;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t c = 0; c < dk; ++c) qh(i, c) = q(i, off + c);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t c = 0; c < dk; ++c) kh(j, c) = k(j, off + c);
        Tensor2D scores = matmul_transposed(qh, kh);
        for (auto& s : scores.data()) s *= inv_sqrt_dk;
        const Tensor2D probs = apply_bias(scores, bias, /*causal=*/false);
        if (observer && *observer) (*observer)(AttentionEvent{0, head, 0, probs});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const float p = probs(i, j);
                for (std::size_t c = 0; c < dk; ++c) out(i, off + c) += p * v(j, off + c);
            }
    }
    return out;
}

} // namespace hl
