#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "hl/highlight.hpp"
#include "hl/numerics.hpp"

namespace hl {

enum class Branch { Normal, Unconditional };

// Deactivation strength paired with an activation factor: log(beta) + 2.
float deactivation_delta(float beta);

// Additive pre-softmax bias, indexed by key position.
struct AttentionBias {
    std::vector<float> values;

    std::size_t size() const { return values.size(); }
    // Generated positions always receive zero bias.
    void append_zero() { values.push_back(0.0f); }
};

// Normal branch: log(beta)·m. Unconditional branch: -(log(beta) + 2)·m.
// Throws ParamError unless beta > 0.
AttentionBias make_bias(const HighlightMask& mask, float beta, Branch branch);

// Row r of `scores` is the query at absolute position query_offset + r.
// Output row r = softmax over keys c <= query_offset + r (all keys when
// !causal) of scores(r, c) + bias[c]; masked-out keys get probability 0.
// Scores must already carry the 1/sqrt(d_k) scaling. An empty bias means
// plain softmax.
Tensor2D apply_bias(const Tensor2D& scores, std::span<const float> bias, bool causal,
                    std::size_t query_offset = 0);

} // namespace hl
