#include "hl/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace hl {

void GuidanceConfig::validate() const {
    auto finite = [](float v) { return std::isfinite(v); };
    if (!finite(alpha) || alpha < 0.0f) throw ParamError("alpha must be finite and >= 0");
    if (!finite(beta) || !(beta > 0.0f)) throw ParamError("beta must be finite and > 0");
    if (!finite(beta_qformer) || !(beta_qformer > 0.0f)) throw ParamError("beta_qformer must be finite and > 0");
    if (!finite(gamma)) throw ParamError("gamma must be finite");
}

EmbeddingSequence build_uncond(const EmbeddingSequence& s, std::span<const std::uint8_t> mask, float alpha) {
    if (mask.size() != s.rows()) {
        throw ShapeError("mask length " + std::to_string(mask.size()) + " != sequence length " +
                         std::to_string(s.rows()));
    }
    EmbeddingSequence out = s;
    const float k = alpha - 1.0f;
    for (std::size_t i = 0; i < s.rows(); ++i) {
        if (!mask[i]) continue;
        for (auto& v : out.row(i)) v = k * v + v;
    }
    return out;
}

namespace {

// Normalized branch in double; rounding happens once, after combining.
std::vector<double> normalize(std::span<const float> v, Rescale rescale) {
    if (v.empty()) throw ShapeError("empty logit vector");
    const double mx = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (float x : v) sum += std::exp(x - mx);
    std::vector<double> out(v.size());
    if (rescale == Rescale::LogSoftmax) {
        const double lse = mx + std::log(sum);
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lse;
    } else {
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::exp(v[i] - mx) / sum;
    }
    return out;
}

} // namespace

LogitVector rescale_logits(std::span<const float> logits, Rescale rescale) {
    const auto n = normalize(logits, rescale);
    return LogitVector(n.begin(), n.end());
}

LogitVector combine_logprobs(std::span<const float> cond, std::span<const float> uncond, float gamma) {
    if (cond.size() != uncond.size()) throw ShapeError("branch logit lengths differ");
    LogitVector out(cond.size());
    const double g = gamma, g1 = g - 1.0;
    for (std::size_t i = 0; i < cond.size(); ++i) out[i] = static_cast<float>(g * cond[i] - g1 * uncond[i]);
    return out;
}


LogitVector combine_logits(std::span<const float> cond, std::span<const float> uncond, float gamma,
                           Rescale rescale) {
    if (cond.size() != uncond.size()) throw ShapeError("branch logit lengths differ");
    const auto c = normalize(cond, rescale);
    const auto u = normalize(uncond, rescale);
    const double g = gamma, g1 = g - 1.0;
    LogitVector out(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) out[i] = static_cast<float>(g * c[i] - g1 * u[i]);
    return out;
}

TokenId greedy_pick(std::span<const float> scores) {
    if (scores.size() < static_cast<std::size_t>(vocab::kEos) + 1) throw ShapeError("score vector shorter than vocabulary");
    TokenId best = 0;
    for (TokenId id = 1; id <= vocab::kEos; ++id) {
        if (id == vocab::kBos) continue;
        if (scores[static_cast<std::size_t>(id)] > scores[static_cast<std::size_t>(best)]) best = id;
    }
    return best;
}

std::vector<ScoredToken> top_k(std::span<const float> scores, std::size_t k) {
    std::vector<TokenId> ids(scores.size());
    std::iota(ids.begin(), ids.end(), 0);
    k = std::min(k, ids.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                      [&](TokenId a, TokenId b) {
                          const float sa = scores[static_cast<std::size_t>(a)];
                          const float sb = scores[static_cast<std::size_t>(b)];
                          return sa > sb || (sa == sb && a < b);
                      });
    std::vector<ScoredToken> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back({ids[i], scores[static_cast<std::size_t>(ids[i])]});
    return out;
}

namespace {

std::size_t visual_length(const Model& model, const ImageInput& image) {
    const auto& cfg = model.config();
    if (image.mapping == VisualMapping::Direct) return cfg.n_patches;
    if (image.mapping == VisualMapping::QFormer) return cfg.n_queries;
    return 0;
}

void check_image(const Model& model, const ImageInput& image) {
    const auto& cfg = model.config();
    if (image.mapping == VisualMapping::None) throw ShapeError("image input needs a visual mapping");
    if (image.mapping == VisualMapping::Direct && image.features.rows() != cfg.n_patches) {
        throw ShapeError("direct mapping expects " + std::to_string(cfg.n_patches) + " patches");
    }
    if (image.features.cols() != cfg.patch_dim || image.features.rows() == 0) {
        throw ShapeError("patch features must have " + std::to_string(cfg.patch_dim) + " columns");
    }
    if (!image.patch_mask.empty() && image.patch_mask.size() != image.features.rows()) {
        throw ShapeError("patch mask length does not match patch count");
    }
}

std::vector<TokenSpan> shift_spans(std::vector<TokenSpan> spans, std::size_t by) {
    for (auto& s : spans) {
        s.token_start += by;
        s.token_end += by;
    }
    return spans;
}

std::vector<TokenSpan> align_all(const Encoding& enc, std::span<const ByteRange> ranges) {
    std::vector<TokenSpan> out;
    for (const auto& r : ranges) out.push_back(align_span(enc.offsets, r.char_start, r.char_end));
    return out;
}

void append_visual_mask(HighlightMask& mask, const VisualBlock& block) {
    const auto& bits = block.image.patch_mask;
    if (bits.empty()) return;
    if (block.image.mapping == VisualMapping::Direct) {
        for (std::size_t i = 0; i < bits.size(); ++i)
            if (bits[i]) mask.set(block.offset + i);
    } else if (std::any_of(bits.begin(), bits.end(), [](auto b) { return b != 0; })) {
        for (std::size_t i = 0; i < block.length; ++i) mask.set(block.offset + i);
    }
}

} // namespace

Prompt build_prompt(const Model& model, std::string_view text, std::span<const ByteRange> highlights,
                    const std::optional<ImageInput>& image) {
    Prompt p;
    auto& tokens = p.input.tokens;
    tokens.push_back(vocab::kBos);
    ContextLayout& layout = p.layout;
    if (image) {
        check_image(model, *image);
        VisualBlock block{*image, tokens.size(), visual_length(model, *image)};
        tokens.insert(tokens.end(), block.length, vocab::kImg);
        layout.mapping = image->mapping;
        layout.visual_offset = block.offset;
        layout.visual_len = block.length;
        p.input.visual = std::move(block);
    }
    const Encoding enc = encode(text);
    layout.text_offset = tokens.size();
    layout.text_len = enc.ids.size();
    tokens.insert(tokens.end(), enc.ids.begin(), enc.ids.end());
    layout.length = tokens.size();

    const auto text_spans = align_all(enc, highlights);
    std::vector<std::uint8_t> text_bits(enc.ids.size(), 0);
    for (const auto& s : text_spans)
        std::fill(text_bits.begin() + static_cast<std::ptrdiff_t>(s.token_start),
                  text_bits.begin() + static_cast<std::ptrdiff_t>(s.token_end), std::uint8_t{1});
    const std::span<const std::uint8_t> patch_bits =
        image ? std::span<const std::uint8_t>(image->patch_mask) : std::span<const std::uint8_t>{};
    p.input.mask = splice(text_bits, patch_bits, layout);
    p.spans = shift_spans(text_spans, layout.text_offset);
    return p;
}

GuidedDecoder::GuidedDecoder(const Model& model, GuidanceConfig cfg, bool vanilla)
    : model_(model), cfg_(cfg), vanilla_(vanilla) {
    cfg_.validate();
}

LogitVector GuidedDecoder::combine() const {
    if (vanilla_) return rescale_logits(last_cond_, cfg_.rescale);
    return combine_logits(last_cond_, last_uncond_, cfg_.gamma, cfg_.rescale);
}

LogitVector GuidedDecoder::prefill(const DecodeInput& input, const DecodeHooks& hooks) {
    const auto& mcfg = model_.config();
    const std::size_t n = input.tokens.size();
    if (n == 0) throw ShapeError("empty context");
    if (input.mask.size() != n) throw ShapeError("mask length does not match context length");
    if (input.mask[0]) throw SinkTokenError("position 0 (sequence start) cannot be highlighted");
    if (n + cfg_.max_new_tokens > mcfg.max_seq) {
        throw CapacityError("context of " + std::to_string(n) + " tokens plus " +
                            std::to_string(cfg_.max_new_tokens) + " new tokens exceeds max_seq " +
                            std::to_string(mcfg.max_seq));
    }

    EmbeddingSequence cond = model_.token_embeddings(input.tokens);
    std::vector<std::uint8_t> rescale_bits(input.mask.bits().begin(), input.mask.bits().end());
    EmbeddingSequence uncond_visual;
    const VisualBlock* vis = input.visual ? &*input.visual : nullptr;
    if (vis) {
        check_image(model_, vis->image);
        if (vis->offset + vis->length > n || vis->length != visual_length(model_, vis->image)) {
            throw ShapeError("visual block does not fit the context");
        }
        EmbeddingSequence rows;
        if (vis->image.mapping == VisualMapping::Direct) {
            rows = model_.project_patches(vis->image.features);
        } else {
            const float bq = vanilla_ ? 1.0f : cfg_.beta_qformer;
            rows = model_.qformer_forward(vis->image.features, vis->image.patch_mask, bq);
            if (!vanilla_) {
                // Unconditional queries come from alpha-rescaled patch features
                // through the plain cross-attention; the LLM-side rescale is
                // skipped for these rows.
                std::vector<std::uint8_t> pm = vis->image.patch_mask;
                if (pm.empty()) pm.assign(vis->image.features.rows(), 0);
                const auto scaled = build_uncond(vis->image.features, pm, cfg_.alpha);
                uncond_visual = model_.qformer_forward(scaled, {}, 1.0f);
                for (std::size_t i = 0; i < vis->length; ++i) rescale_bits[vis->offset + i] = 0;
            }
        }
        for (std::size_t i = 0; i < vis->length; ++i)
            std::copy(rows.row(i).begin(), rows.row(i).end(), cond.row(vis->offset + i).begin());
    }

    mask_ = input.mask;
    cond_cache_ = model_.new_cache();
    if (vanilla_) {
        model_.add_positions(cond, 0);
        last_cond_ = model_.forward_step(cond_cache_, cond, {}, hooks.cond_observer);
        last_uncond_.clear();
        return combine();
    }

    EmbeddingSequence uncond = build_uncond(cond, rescale_bits, cfg_.alpha);
    if (!uncond_visual.empty()) {
        for (std::size_t i = 0; i < vis->length; ++i)
            std::copy(uncond_visual.row(i).begin(), uncond_visual.row(i).end(),
                      uncond.row(vis->offset + i).begin());
    }
    model_.add_positions(cond, 0);
    model_.add_positions(uncond, 0);
    cond_bias_ = make_bias(mask_, cfg_.beta, Branch::Normal);
    uncond_bias_ = make_bias(mask_, cfg_.beta, Branch::Unconditional);
    uncond_cache_ = model_.new_cache();
    last_cond_ = model_.forward_step(cond_cache_, cond, cond_bias_.values, hooks.cond_observer);
    last_uncond_ = model_.forward_step(uncond_cache_, uncond, uncond_bias_.values, hooks.uncond_observer);
    return combine();
}

LogitVector GuidedDecoder::step(TokenId token, const DecodeHooks& hooks) {
    if (cond_cache_.length() == 0) throw Error("step before prefill");
    const TokenId one[] = {token};
    EmbeddingSequence x = model_.token_embeddings(one);
    model_.add_positions(x, cond_cache_.length());
    mask_.append_zero();
    if (vanilla_) {
        last_cond_ = model_.forward_step(cond_cache_, x, {}, hooks.cond_observer);
        return combine();
    }
    cond_bias_.append_zero();
    uncond_bias_.append_zero();
    last_cond_ = model_.forward_step(cond_cache_, x, cond_bias_.values, hooks.cond_observer);
    last_uncond_ = model_.forward_step(uncond_cache_, x, uncond_bias_.values, hooks.uncond_observer);
    return combine();
}

namespace {

GenerationResult run_decode(const Model& model, const DecodeInput& input, const GuidanceConfig& cfg,
                            bool vanilla, const DecodeHooks& hooks) {
    GuidedDecoder dec(model, cfg, vanilla);
    GenerationResult res;
    res.params = cfg;
    res.vanilla = vanilla;
    res.context_len = input.tokens.size();
    if (cfg.max_new_tokens == 0) {
        // Still validate the context.
        dec.prefill(input, hooks);
        return res;
    }
    LogitVector scores = dec.prefill(input, hooks);
    for (std::size_t step = 0; step < cfg.max_new_tokens; ++step) {
        StepRecord rec;
        rec.chosen = greedy_pick(scores);
        rec.top_cond = top_k(rescale_logits(dec.last_cond(), cfg.rescale));
        if (!vanilla) rec.top_uncond = top_k(rescale_logits(dec.last_uncond(), cfg.rescale));
        rec.top_combined = top_k(scores);
        res.steps.push_back(rec);
        const bool keep_going = !hooks.on_token || hooks.on_token(step, rec);
        if (rec.chosen == vocab::kEos) {
            res.stopped_at_eos = true;
            break;
        }
        res.tokens.push_back(rec.chosen);
        if (!keep_going || step + 1 == cfg.max_new_tokens) break;
        scores = dec.step(rec.chosen, hooks);
    }
    res.text = hl::decode(res.tokens);
    return res;
}

} // namespace

GenerationResult decode(const Model& model, const DecodeInput& input, const GuidanceConfig& cfg,
                        const DecodeHooks& hooks) {
    return run_decode(model, input, cfg, false, hooks);
}

GenerationResult decode_vanilla(const Model& model, const DecodeInput& input, const GuidanceConfig& cfg,
                                const DecodeHooks& hooks) {
    return run_decode(model, input, cfg, true, hooks);
}

void Conversation::set_patch_mask(std::vector<std::uint8_t> bits) {
    if (!image_) throw ShapeError("conversation has no image");
    if (!bits.empty() && bits.size() != image_->features.rows()) throw ShapeError("patch mask length mismatch");
    image_->patch_mask = std::move(bits);
}

void Conversation::add_user_turn(std::string text, std::vector<ByteRange> highlights, bool keep_previous) {
    if (!keep_previous) {
        for (auto& r : rounds_) {
            r.highlights.clear();
            r.reply_highlights.clear();
        }
    }
    rounds_.push_back({std::move(text), std::move(highlights), {}, {}});
}

void Conversation::record_reply(std::span<const TokenId> tokens) {
    if (rounds_.empty()) throw Error("no user turn to reply to");
    auto& reply = rounds_.back().reply;
    reply.clear();
    for (TokenId t : tokens)
        if (t != vocab::kEos) reply.push_back(t);
}

void Conversation::set_user_highlights(std::size_t round, std::vector<ByteRange> highlights) {
    if (round >= rounds_.size()) throw BoundsError("no such round");
    rounds_[round].highlights = std::move(highlights);
}

void Conversation::set_reply_highlights(std::size_t round, std::vector<ByteRange> highlights) {
    if (round >= rounds_.size()) throw BoundsError("no such round");
    rounds_[round].reply_highlights = std::move(highlights);
}

Prompt Conversation::build(const Model& model) const {
    if (rounds_.empty()) throw Error("conversation has no user turn");
    Prompt p;
    auto& tokens = p.input.tokens;
    tokens.push_back(vocab::kBos);
    if (image_) {
        check_image(model, *image_);
        VisualBlock block{*image_, tokens.size(), visual_length(model, *image_)};
        tokens.insert(tokens.end(), block.length, vocab::kImg);
        p.layout.mapping = image_->mapping;
        p.layout.visual_offset = block.offset;
        p.layout.visual_len = block.length;
        p.input.visual = std::move(block);
    }
    std::vector<TokenSpan> spans;
    for (std::size_t r = 0; r < rounds_.size(); ++r) {
        const auto& round = rounds_[r];
        if (r > 0) {
            const auto sep = encode(kSeparator);
            tokens.insert(tokens.end(), sep.ids.begin(), sep.ids.end());
        }
        const Encoding user = encode(round.user_text);
        const auto us = shift_spans(align_all(user, round.highlights), tokens.size());
        spans.insert(spans.end(), us.begin(), us.end());
        if (r + 1 == rounds_.size()) {
            p.layout.text_offset = tokens.size();
            p.layout.text_len = user.ids.size();
        }
        tokens.insert(tokens.end(), user.ids.begin(), user.ids.end());

        std::vector<ByteOffset> reply_offsets;
        for (std::size_t i = 0; i < round.reply.size(); ++i) reply_offsets.push_back({i, i + 1});
        for (const auto& h : round.reply_highlights) {
            auto s = align_span(reply_offsets, h.char_start, h.char_end);
            s.token_start += tokens.size();
            s.token_end += tokens.size();
            spans.push_back(s);
        }
        tokens.insert(tokens.end(), round.reply.begin(), round.reply.end());
    }
    p.layout.length = tokens.size();
    p.input.mask = from_spans(tokens.size(), spans);
    if (p.input.visual) append_visual_mask(p.input.mask, *p.input.visual);
    p.spans = std::move(spans);
    return p;
}

GenerationResult continue_round(const Model& model, Conversation& conv, std::string user_text,
                                std::vector<ByteRange> highlights, const GuidanceConfig& cfg,
                                bool keep_previous, bool vanilla, const DecodeHooks& hooks) {
    conv.add_user_turn(std::move(user_text), std::move(highlights), keep_previous);
    const Prompt prompt = conv.build(model);
    GenerationResult res = vanilla ? decode_vanilla(model, prompt.input, cfg, hooks)
                                   : decode(model, prompt.input, cfg, hooks);
    res.spans = prompt.spans;
    conv.record_reply(res.tokens);
    return res;
}

} // namespace hl
