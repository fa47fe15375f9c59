#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hl/activation.hpp"
#include "hl/highlight.hpp"
#include "hl/model.hpp"

namespace hl {

// How logits are normalized before the two branches are combined.
// LogSoftmax is used for generation; Softmax (raw probabilities) suits
// single-token scoring.
enum class Rescale { LogSoftmax, Softmax };

struct GuidanceConfig {
    float alpha = 0.01f;        // embedding rescale of highlighted tokens, unconditional branch
    float beta = 2.0f;          // self-attention activation factor
    float beta_qformer = 20.0f; // Q-Former cross-attention activation factor
    float gamma = 1.3f;         // guidance strength
    std::size_t max_new_tokens = 64;
    Rescale rescale = Rescale::LogSoftmax;

    // Always derived from beta: log(beta) + 2.
    float delta() const { return deactivation_delta(beta); }
    // Throws ParamError.
    void validate() const;
};

// s̄_i = (alpha - 1)·m_i·s_i + s_i, applied to raw token embeddings f(x_i)
// (before positions are added).
EmbeddingSequence build_uncond(const EmbeddingSequence& s, std::span<const std::uint8_t> mask, float alpha);

// gamma·cond - (gamma - 1)·uncond on already normalized inputs.
LogitVector combine_logprobs(std::span<const float> cond, std::span<const float> uncond, float gamma);
// Normalizes both inputs with `rescale`, then combines.
LogitVector combine_logits(std::span<const float> cond, std::span<const float> uncond, float gamma,
                           Rescale rescale);
LogitVector rescale_logits(std::span<const float> logits, Rescale rescale);

// Highest value among candidate ids, lowest id on ties. Candidates are the
// byte tokens plus EOS; BOS, IMG and PAD are never produced.
TokenId greedy_pick(std::span<const float> scores);

struct ImageInput {
    Tensor2D features; // N × patch_dim, row-major patch order
    VisualMapping mapping = VisualMapping::Direct;
    std::vector<std::uint8_t> patch_mask; // empty or N bits
};

struct VisualBlock {
    ImageInput image;
    std::size_t offset = 0; // first IMG position in the context
    std::size_t length = 0; // P² (direct) or M (Q-Former)
};

// Everything a decode needs: the token context (IMG placeholders where the
// visual block sits), the highlight mask over it, and the visual payload.
struct DecodeInput {
    std::vector<TokenId> tokens;
    HighlightMask mask;
    std::optional<VisualBlock> visual;
};

struct ByteRange {
    std::size_t char_start = 0;
    std::size_t char_end = 0;
};

struct Prompt {
    DecodeInput input;
    ContextLayout layout;
    std::vector<TokenSpan> spans; // highlighted spans in context coordinates
};

// Context = BOS, optional visual block, then the text bytes. Highlight
// ranges are byte offsets into `text` and are widened to token boundaries.
Prompt build_prompt(const Model& model, std::string_view text, std::span<const ByteRange> highlights,
                    const std::optional<ImageInput>& image = std::nullopt);

struct ScoredToken {
    TokenId id;
    float value;
};

struct StepRecord {
    TokenId chosen = 0;
    std::vector<ScoredToken> top_cond;
    std::vector<ScoredToken> top_uncond; // empty for vanilla decodes
    std::vector<ScoredToken> top_combined;
};

inline constexpr std::size_t kTopK = 5;
std::vector<ScoredToken> top_k(std::span<const float> scores, std::size_t k = kTopK);

struct GenerationResult {
    std::string text;
    std::vector<TokenId> tokens;
    std::vector<StepRecord> steps;
    GuidanceConfig params;
    bool vanilla = false;
    bool stopped_at_eos = false;
    std::size_t context_len = 0;
    std::vector<TokenSpan> spans;
};

struct DecodeHooks {
    const AttentionObserver* cond_observer = nullptr;
    const AttentionObserver* uncond_observer = nullptr;
    // Called after each chosen token; returning false stops the decode.
    std::function<bool(std::size_t step, const StepRecord&)> on_token;
};

// The two-branch decode state: caches for both branches, the growing mask
// and the per-branch attention biases. Vanilla mode runs the conditional
// branch alone without any bias.
class GuidedDecoder {
public:
    GuidedDecoder(const Model& model, GuidanceConfig cfg, bool vanilla = false);

    // Prefills both branches with the full context; returns combined scores
    // for the next token. Throws CapacityError / SinkTokenError / ShapeError.
    LogitVector prefill(const DecodeInput& input, const DecodeHooks& hooks = {});
    // Appends a generated token (mask bit 0, identical embedding in both
    // branches) and returns combined scores for the following token.
    LogitVector step(TokenId token, const DecodeHooks& hooks = {});

    std::size_t length() const { return cond_cache_.length(); }
    const HighlightMask& mask() const { return mask_; }
    const KVCache& cond_cache() const { return cond_cache_; }
    const KVCache& uncond_cache() const { return uncond_cache_; }
    const LogitVector& last_cond() const { return last_cond_; }
    const LogitVector& last_uncond() const { return last_uncond_; }

private:
    LogitVector combine() const;

    const Model& model_;
    GuidanceConfig cfg_;
    bool vanilla_;
    KVCache cond_cache_;
    KVCache uncond_cache_;
    HighlightMask mask_;
    AttentionBias cond_bias_;
    AttentionBias uncond_bias_;
    LogitVector last_cond_;
    LogitVector last_uncond_;
};

// Greedy highlighted decode until EOS or max_new_tokens.
GenerationResult decode(const Model& model, const DecodeInput& input, const GuidanceConfig& cfg,
                        const DecodeHooks& hooks = {});
// Single-branch greedy baseline.
GenerationResult decode_vanilla(const Model& model, const DecodeInput& input, const GuidanceConfig& cfg,
                                const DecodeHooks& hooks = {});

// Multi-round chat. Rounds are concatenated as user text, model reply, and a
// "\n" separator before the next user turn. Every round re-prefills the
// whole conversation with fresh caches.
class Conversation {
public:
    static constexpr std::string_view kSeparator = "\n";

    struct Round {
        std::string user_text;
        std::vector<ByteRange> highlights;       // over user_text
        std::vector<ByteRange> reply_highlights; // over the reply text
        std::vector<TokenId> reply;              // without EOS
    };

    Conversation() = default;
    explicit Conversation(std::optional<ImageInput> image) : image_(std::move(image)) {}

    const std::vector<Round>& rounds() const { return rounds_; }
    const std::optional<ImageInput>& image() const { return image_; }
    void set_patch_mask(std::vector<std::uint8_t> bits);

    // Adds a new user turn. When keep_previous is false, earlier highlights
    // are cleared so only this round's selection is active.
    void add_user_turn(std::string text, std::vector<ByteRange> highlights, bool keep_previous = false);
    void record_reply(std::span<const TokenId> tokens);
    void set_user_highlights(std::size_t round, std::vector<ByteRange> highlights);
    void set_reply_highlights(std::size_t round, std::vector<ByteRange> highlights);

    // Context for generating the reply to the last user turn.
    Prompt build(const Model& model) const;

private:
    std::optional<ImageInput> image_;
    std::vector<Round> rounds_;
};

// Appends a user turn, rebuilds the grown context with the updated mask,
// decodes from scratch, and records the reply.
GenerationResult continue_round(const Model& model, Conversation& conv, std::string user_text,
                                std::vector<ByteRange> highlights, const GuidanceConfig& cfg,
                                bool keep_previous = false, bool vanilla = false,
                                const DecodeHooks& hooks = {});

} // namespace hl
