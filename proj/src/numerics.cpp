#include "hl/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace hl {

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) + " != " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

Tensor2D Tensor2D::from_rows(const std::vector<std::vector<float>>& rows) {
    if (rows.empty()) return {};
    const std::size_t cols = rows.front().size();
    std::vector<float> data;
    data.reserve(rows.size() * cols);
    for (const auto& r : rows) {
        if (r.size() != cols) throw ShapeError("ragged rows");
        data.insert(data.end(), r.begin(), r.end());
    }
    return {rows.size(), cols, std::move(data)};
}

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " by " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    Tensor2D out(a.rows(), b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        float* orow = po + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const float av = pa[i * k + p];
            const float* brow = pb + p * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

Tensor2D matmul_transposed(const Tensor2D& a, const Tensor2D& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_transposed: inner dims " + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.cols()));
    }
    Tensor2D out(a.rows(), b.rows());
    const std::size_t k = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto ar = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const auto br = b.row(j);
            float acc = 0.0f;
            for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
            out(i, j) = acc;
        }
    }
    return out;
}

std::vector<float> softmax_row(std::span<const float> v) {
    if (v.empty()) throw ShapeError("softmax of empty row");
    const float mx = *std::max_element(v.begin(), v.end());
    std::vector<float> out(v.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        sum += out[i];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (auto& x : out) x *= inv;
    return out;
}

std::vector<float> log_softmax_row(std::span<const float> v) {
    if (v.empty()) throw ShapeError("log_softmax of empty row");
    const float mx = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (float x : v) sum += std::exp(static_cast<double>(x - mx));
    const float lse = mx + static_cast<float>(std::log(sum));
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lse;
    return out;
}

std::vector<float> layernorm(std::span<const float> v, std::span<const float> gain,
                             std::span<const float> bias, float eps) {
    if (v.size() != gain.size() || v.size() != bias.size()) {
        throw ShapeError("layernorm: length mismatch");
    }
    if (v.empty()) return {};
    double mean = 0.0;
    for (float x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (float x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    const double rstd = 1.0 / std::sqrt(var + eps);
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = static_cast<float>((v[i] - mean) * rstd) * gain[i] + bias[i];
    }
    return out;
}

Tensor2D layernorm_rows(const Tensor2D& x, std::span<const float> gain,
                        std::span<const float> bias, float eps) {
    Tensor2D out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto n = layernorm(x.row(r), gain, bias, eps);
        std::copy(n.begin(), n.end(), out.row(r).begin());
    }
    return out;
}

float gelu(float x) {
    constexpr float kC = 0.7978845608028654f; // sqrt(2/pi)
    return 0.5f * x * (1.0f + std::tanh(kC * (x + 0.044715f * x * x * x)));
}

void add_inplace(Tensor2D& dst, const Tensor2D& src) {
    if (dst.rows() != src.rows() || dst.cols() != src.cols()) throw ShapeError("add: shape mismatch");
    auto& d = dst.data();
    const auto& s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void add_row_bias(Tensor2D& dst, std::span<const float> bias) {
    if (bias.size() != dst.cols()) throw ShapeError("row bias: length mismatch");
    for (std::size_t r = 0; r < dst.rows(); ++r) {
        auto row = dst.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
    }
}

void scale_inplace(std::span<float> v, float s) {
    for (auto& x : v) x *= s;
}

} // namespace hl
