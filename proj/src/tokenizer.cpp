#include "hl/tokenizer.hpp"

#include "hl/errors.hpp"

namespace hl {

Encoding encode(std::string_view text) {
    Encoding enc;
    enc.ids.reserve(text.size());
    enc.offsets.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        enc.ids.push_back(static_cast<TokenId>(static_cast<unsigned char>(text[i])));
        enc.offsets.push_back({i, i + 1});
    }
    return enc;
}

std::string token_text(TokenId id) {
    switch (id) {
    case vocab::kBos: return "<s>";
    case vocab::kEos: return "</s>";
    case vocab::kImg: return "<img>";
    case vocab::kPad: return "<pad>";
    default: break;
    }
    if (id < 0 || id > 255) throw VocabError("token id out of range: " + std::to_string(id));
    return std::string(1, static_cast<char>(static_cast<unsigned char>(id)));
}

std::string decode(std::span<const TokenId> ids) {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) out += token_text(id);
    return out;
}

TokenSpan align_span(std::span<const ByteOffset> offsets, std::size_t char_start,
                     std::size_t char_end) {
    if (char_start >= char_end) {
        throw BoundsError("empty selection [" + std::to_string(char_start) + ", " +
                          std::to_string(char_end) + ")");
    }
    const std::size_t text_len = offsets.empty() ? 0 : offsets.back().end;
    if (char_end > text_len) {
        throw BoundsError("selection end " + std::to_string(char_end) + " beyond text length " +
                          std::to_string(text_len));
    }
    TokenSpan span;
    bool found_start = false;
    for (std::size_t t = 0; t < offsets.size(); ++t) {
        if (!found_start && offsets[t].end > char_start) {
            span.token_start = t;
            span.char_start = offsets[t].start;
            found_start = true;
        }
        if (found_start && offsets[t].end >= char_end) {
            span.token_end = t + 1;
            span.char_end = offsets[t].end;
            return span;
        }
    }
    throw BoundsError("selection not covered by token offsets");
}

} // namespace hl
