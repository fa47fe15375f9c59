#include "hl/activation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace hl {

float deactivation_delta(float beta) {
    return std::log(beta) + 2.0f;
}

AttentionBias make_bias(const HighlightMask& mask, float beta, Branch branch) {
    if (!(beta > 0.0f) || !std::isfinite(beta)) throw ParamError("beta must be positive and finite");
    const float w = branch == Branch::Normal ? std::log(beta) : -deactivation_delta(beta);
    AttentionBias bias;
    bias.values.resize(mask.size(), 0.0f);
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) bias.values[i] = w;
    return bias;
}

Tensor2D apply_bias(const Tensor2D& scores, std::span<const float> bias, bool causal,
                    std::size_t query_offset) {
    const std::size_t n_keys = scores.cols();
    if (!bias.empty() && bias.size() != n_keys) {
        throw ShapeError("attention bias length " + std::to_string(bias.size()) + " != key count " +
                         std::to_string(n_keys));
    }
    Tensor2D probs(scores.rows(), n_keys);
    std::vector<float> h;
    for (std::size_t r = 0; r < scores.rows(); ++r) {
        const std::size_t support = causal ? std::min(n_keys, query_offset + r + 1) : n_keys;
        if (support == 0) throw ShapeError("attention row with no visible keys");
        const auto row = scores.row(r);
        h.assign(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(support));
        if (!bias.empty())
            for (std::size_t c = 0; c < support; ++c) h[c] += bias[c];
        const auto p = softmax_row(h);
        std::copy(p.begin(), p.end(), probs.row(r).begin());
    }
    return probs;
}

} // namespace hl
