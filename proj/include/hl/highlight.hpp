#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "hl/tokenizer.hpp"

namespace hl {

// Per-position binary highlight bits, aligned 1:1 with the context.
// Position 0 holds the sequence-start sink token and can never be set.
class HighlightMask {
public:
    HighlightMask() = default;
    explicit HighlightMask(std::size_t length) : bits_(length, 0) {}
    // Throws SinkTokenError if bits[0] is set.
    explicit HighlightMask(std::vector<std::uint8_t> bits);

    std::size_t size() const { return bits_.size(); }
    bool operator[](std::size_t i) const { return bits_[i] != 0; }
    // Throws SinkTokenError for i == 0, BoundsError past the end.
    void set(std::size_t i, bool on = true);

    // Generated tokens are never highlighted.
    void append_zero() { bits_.push_back(0); }
    void append(const HighlightMask& other);

    std::size_t count() const;
    bool any() const { return count() != 0; }
    std::span<const std::uint8_t> bits() const { return bits_; }

    bool operator==(const HighlightMask&) const = default;

private:
    std::vector<std::uint8_t> bits_;
};

// Bit i is set iff some span covers i. Throws BoundsError for spans past
// context_len and SinkTokenError for spans touching position 0.
HighlightMask from_spans(std::size_t context_len, std::span<const TokenSpan> spans);

struct ImageDims {
    std::size_t width = 0;
    std::size_t height = 0;
};

struct PixelRect {
    std::size_t x0 = 0, y0 = 0; // inclusive
    std::size_t x1 = 0, y1 = 0; // exclusive
};

// User selection on the image: a rectangle, or a free-form per-pixel mask
// (row-major, width*height bytes) at the original image resolution.
struct PatchRegion {
    std::optional<PixelRect> rect;
    std::vector<std::uint8_t> pixels;

    static PatchRegion rectangle(PixelRect r) { return {r, {}}; }
    static PatchRegion freeform(std::vector<std::uint8_t> pixels) { return {std::nullopt, std::move(pixels)}; }
    bool covers(std::size_t x, std::size_t y, const ImageDims& dims) const;
};

inline constexpr double kPatchCoverageThreshold = 0.5;
// Pass as min_fraction to accept any overlap at all.
inline constexpr double kAnyOverlap = 0.0;

// Patch (r, c) of a P×P grid covers pixels [c*W/P, (c+1)*W/P) ×
// [r*H/P, (r+1)*H/P). Its bit is set when the covered fraction of that area
// is >= min_fraction (and > 0). Throws EmptySelectionError if no bit is set.
std::vector<std::uint8_t> downsample_region(const PatchRegion& region, const ImageDims& dims,
                                            std::size_t grid,
                                            double min_fraction = kPatchCoverageThreshold);

enum class VisualMapping { None, Direct, QFormer };

// Where the text and visual blocks sit inside the context sequence.
struct ContextLayout {
    std::size_t length = 0;
    std::size_t text_offset = 0;
    std::size_t text_len = 0;
    std::size_t visual_offset = 0;
    std::size_t visual_len = 0;
    VisualMapping mapping = VisualMapping::None;
};

// Builds the full-context mask. Direct mapping copies patch bits onto the
// P² visual positions; Q-Former mapping sets every query position when any
// patch is selected (the patch bits themselves drive the Q-Former).
HighlightMask splice(std::span<const std::uint8_t> text_mask,
                     std::span<const std::uint8_t> patch_mask, const ContextLayout& layout);

} // namespace hl
