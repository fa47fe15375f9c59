#pragma once

// Test oracles. The reference forward pass recomputes the whole network in
// double precision from the raw weight tables; no_cache_decode is the only
// helper that calls into the engine (one fresh full-context forward per step).

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hl/guidance.hpp"
#include "hl/model.hpp"

namespace ref {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

// Small config for fast unit tests: 2 layers, 2 heads, d_model 16.
hl::ModelConfig tiny_config();

struct Rng {
    explicit Rng(std::uint64_t seed) : gen(seed) {}
    double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(gen); }
    double normal(double sd = 1.0) { return std::normal_distribution<double>(0.0, sd)(gen); }
    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(gen); }
    bool coin(double p = 0.5) { return uniform() < p; }
    std::mt19937_64 gen;
};

std::string random_ascii(Rng& rng, std::size_t len);
// Random 0/1 mask of length n with bit 0 clear and at least one bit set.
std::vector<std::uint8_t> random_mask(Rng& rng, std::size_t n, double p = 0.3);
hl::Tensor2D random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double sd = 1.0);

Vec softmax(const Vec& v);
Vec log_softmax(const Vec& v);
double gelu(double x);
Vec layernorm(const Vec& v, const hl::Tensor2D& g, const hl::Tensor2D& b, double eps);

Mat to_mat(const hl::Tensor2D& t);
Vec row_of(const hl::Tensor2D& t, std::size_t r);

// f(x_i) rows, optionally scaled by alpha where mask is set, plus positions.
Mat embed(const hl::WeightSet& ws, const std::vector<hl::TokenId>& tokens,
          const std::vector<std::uint8_t>& scale_mask = {}, double alpha = 1.0);

// Full-sequence causal forward; returns logits at every position. `bias`
// is indexed by key position (empty = none); it is added after the
// 1/sqrt(d_k) scaling.
Mat forward_all(const hl::WeightSet& ws, const hl::ModelConfig& cfg, const Mat& x, const Vec& bias = {});
Vec forward_last(const hl::WeightSet& ws, const hl::ModelConfig& cfg, const Mat& x, const Vec& bias = {});

// Greedy choice over bytes + EOS, lowest id on ties.
hl::TokenId argmax_candidates(const Vec& scores);

// Two-branch highlighted decode that rebuilds both full contexts and runs
// them through a fresh cache at every step (no reuse between steps).
// Text-only contexts.
struct OracleStep {
    hl::TokenId chosen;
    Vec cond;     // normalized conditional scores
    Vec uncond;   // normalized unconditional scores
    Vec combined;
};
// With stop_at_eos false, a chosen EOS is fed back like any other token.
std::vector<OracleStep> no_cache_decode(const hl::Model& model, const std::vector<hl::TokenId>& tokens,
                                        const std::vector<std::uint8_t>& mask, const hl::GuidanceConfig& cfg,
                                        bool stop_at_eos = true);

double max_abs_diff(std::span<const float> a, const Vec& b);
double max_abs_diff(std::span<const float> a, std::span<const float> b);

} // namespace ref
