#include "hl/highlight.hpp"

#include <algorithm>
#include <string>

#include "hl/errors.hpp"

namespace hl {

HighlightMask::HighlightMask(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
    for (auto& b : bits_) b = b ? 1 : 0;
    if (!bits_.empty() && bits_[0]) throw SinkTokenError("position 0 (sequence start) cannot be highlighted");
}

void HighlightMask::set(std::size_t i, bool on) {
    if (i >= bits_.size()) throw BoundsError("mask index " + std::to_string(i) + " out of range");
    if (i == 0 && on) throw SinkTokenError("position 0 (sequence start) cannot be highlighted");
    bits_[i] = on ? 1 : 0;
}

void HighlightMask::append(const HighlightMask& other) {
    bits_.insert(bits_.end(), other.bits_.begin(), other.bits_.end());
}

std::size_t HighlightMask::count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

HighlightMask from_spans(std::size_t context_len, std::span<const TokenSpan> spans) {
    HighlightMask mask(context_len);
    for (const auto& s : spans) {
        if (s.token_start >= s.token_end || s.token_end > context_len) {
            throw BoundsError("span [" + std::to_string(s.token_start) + ", " +
                              std::to_string(s.token_end) + ") outside context of length " +
                              std::to_string(context_len));
        }
        for (std::size_t i = s.token_start; i < s.token_end; ++i) mask.set(i);
    }
    return mask;
}

bool PatchRegion::covers(std::size_t x, std::size_t y, const ImageDims& dims) const {
    if (rect) return x >= rect->x0 && x < rect->x1 && y >= rect->y0 && y < rect->y1;
    return pixels[y * dims.width + x] != 0;
}

std::vector<std::uint8_t> downsample_region(const PatchRegion& region, const ImageDims& dims,
                                            std::size_t grid, double min_fraction) {
    if (grid == 0 || dims.width < grid || dims.height < grid) {
        throw ShapeError("image " + std::to_string(dims.width) + "x" + std::to_string(dims.height) +
                         " too small for a " + std::to_string(grid) + "x" + std::to_string(grid) +
                         " patch grid");
    }
    if (!region.rect && region.pixels.size() != dims.width * dims.height) {
        throw ShapeError("free-form region size does not match image dims");
    }
    std::vector<std::uint8_t> bits(grid * grid, 0);
    bool any = false;
    for (std::size_t r = 0; r < grid; ++r) {
        const std::size_t y0 = r * dims.height / grid, y1 = (r + 1) * dims.height / grid;
        for (std::size_t c = 0; c < grid; ++c) {
            const std::size_t x0 = c * dims.width / grid, x1 = (c + 1) * dims.width / grid;
            std::size_t covered = 0;
            if (region.rect) {
                const auto& rc = *region.rect;
                const std::size_t ix0 = std::max(x0, rc.x0), ix1 = std::min(x1, rc.x1);
                const std::size_t iy0 = std::max(y0, rc.y0), iy1 = std::min(y1, rc.y1);
                if (ix0 < ix1 && iy0 < iy1) covered = (ix1 - ix0) * (iy1 - iy0);
            } else {
                for (std::size_t y = y0; y < y1; ++y)
                    for (std::size_t x = x0; x < x1; ++x) covered += region.pixels[y * dims.width + x] ? 1 : 0;
            }
            const std::size_t area = (x1 - x0) * (y1 - y0);
            const double frac = static_cast<double>(covered) / static_cast<double>(area);
            if (covered > 0 && frac >= min_fraction) {
                bits[r * grid + c] = 1;
                any = true;
            }
        }
    }
    if (!any) throw EmptySelectionError("region covers no patch at the requested threshold");
    return bits;
}

HighlightMask splice(std::span<const std::uint8_t> text_mask,
                     std::span<const std::uint8_t> patch_mask, const ContextLayout& layout) {
    if (text_mask.size() != layout.text_len) throw ShapeError("text mask length does not match layout");
    if (layout.text_offset + layout.text_len > layout.length ||
        layout.visual_offset + layout.visual_len > layout.length) {
        throw ShapeError("layout blocks exceed context length");
    }
    HighlightMask mask(layout.length);
    for (std::size_t i = 0; i < text_mask.size(); ++i)
        if (text_mask[i]) mask.set(layout.text_offset + i);

    if (patch_mask.empty() || layout.mapping == VisualMapping::None) return mask;
    if (layout.mapping == VisualMapping::Direct) {
        if (patch_mask.size() != layout.visual_len) throw ShapeError("patch mask length does not match visual block");
        for (std::size_t i = 0; i < patch_mask.size(); ++i)
            if (patch_mask[i]) mask.set(layout.visual_offset + i);
    } else {
        const bool any = std::any_of(patch_mask.begin(), patch_mask.end(), [](auto b) { return b != 0; });
        if (any)
            for (std::size_t i = 0; i < layout.visual_len; ++i) mask.set(layout.visual_offset + i);
    }
    return mask;
}

} // namespace hl
