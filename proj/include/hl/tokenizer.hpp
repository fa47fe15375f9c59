#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hl {

using TokenId = std::int32_t;

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by specials.
namespace vocab {
inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr TokenId kImg = 258;
inline constexpr TokenId kPad = 259;
inline constexpr std::size_t kSize = 260;

inline bool is_special(TokenId id) { return id >= kBos; }
} // namespace vocab

// Half-open byte range [start, end) covered by one token.
struct ByteOffset {
    std::size_t start = 0;
    std::size_t end = 0;
    bool operator==(const ByteOffset&) const = default;
};

struct Encoding {
    std::vector<TokenId> ids;
    std::vector<ByteOffset> offsets;
};

struct TokenSpan {
    std::size_t token_start = 0; // inclusive
    std::size_t token_end = 0;   // exclusive
    std::size_t char_start = 0;  // byte offset
    std::size_t char_end = 0;
    bool operator==(const TokenSpan&) const = default;
};

Encoding encode(std::string_view text);

// Specials decode to their marker strings ("<s>", "</s>", "<img>", "<pad>").
std::string decode(std::span<const TokenId> ids);
std::string token_text(TokenId id);

// Minimal token range whose byte coverage contains [char_start, char_end).
// The selection is widened outward to token boundaries, never shrunk.
// Throws BoundsError if the range is empty or falls outside the offsets.
TokenSpan align_span(std::span<const ByteOffset> offsets, std::size_t char_start,
                     std::size_t char_end);

} // namespace hl
