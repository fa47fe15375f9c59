#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "hl/errors.hpp"

namespace hl {

inline constexpr float kLayerNormEps = 1e-5f;

// Dense row-major float matrix.
class Tensor2D {
public:
    Tensor2D() = default;
    Tensor2D(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data);

    static Tensor2D from_rows(const std::vector<std::vector<float>>& rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<float>& data() { return data_; }
    const std::vector<float>& data() const { return data_; }

    bool operator==(const Tensor2D&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// Next-token logits, one entry per vocabulary id.
using LogitVector = std::vector<float>;

// a (n×k) · b (k×m). Accumulation order is fixed: for each output row,
// k outer, j inner, so results are bit-reproducible on one platform.
Tensor2D matmul(const Tensor2D& a, const Tensor2D& b);

// a (n×k) · bᵀ where b is (m×k).
Tensor2D matmul_transposed(const Tensor2D& a, const Tensor2D& b);

std::vector<float> softmax_row(std::span<const float> v);
std::vector<float> log_softmax_row(std::span<const float> v);

std::vector<float> layernorm(std::span<const float> v, std::span<const float> gain,
                             std::span<const float> bias, float eps = kLayerNormEps);

// Row-wise layernorm of a matrix with shared gain/bias.
Tensor2D layernorm_rows(const Tensor2D& x, std::span<const float> gain,
                        std::span<const float> bias, float eps = kLayerNormEps);

// tanh approximation used by GPT-2.
float gelu(float x);

void add_inplace(Tensor2D& dst, const Tensor2D& src);
void add_row_bias(Tensor2D& dst, std::span<const float> bias);
void scale_inplace(std::span<float> v, float s);

} // namespace hl
