#include <cmath>
#include <numeric>

#include "doctest.h"
#include "hl/numerics.hpp"
#include "reference.hpp"

using hl::Tensor2D;

TEST_CASE("matmul hand examples") {
    const auto id = Tensor2D::from_rows({{1, 0}, {0, 1}});
    const auto b = Tensor2D::from_rows({{3, 4}, {5, 6}});
    CHECK(hl::matmul(id, b) == b);
    const auto r = hl::matmul(Tensor2D::from_rows({{1, 2}}), Tensor2D::from_rows({{3}, {4}}));
    CHECK(r.rows() == 1);
    CHECK(r.cols() == 1);
    CHECK(r(0, 0) == 11.0f);
}

TEST_CASE("matmul matches triple loop and is reproducible") {
    ref::Rng rng(3);
    const auto a = ref::random_tensor(rng, 8, 8);
    const auto b = ref::random_tensor(rng, 8, 8);
    const auto c = hl::matmul(a, b);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < 8; ++k) acc += static_cast<double>(a(i, k)) * b(k, j);
            CHECK(std::fabs(c(i, j) - acc) < 1e-5);
        }
    CHECK(hl::matmul(a, b) == c);

    const auto ct = hl::matmul_transposed(a, b);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < 8; ++k) acc += static_cast<double>(a(i, k)) * b(j, k);
            CHECK(std::fabs(ct(i, j) - acc) < 1e-5);
        }
}

TEST_CASE("matmul shape mismatch") {
    CHECK_THROWS_AS(hl::matmul(Tensor2D(2, 3), Tensor2D(2, 3)), hl::ShapeError);
    CHECK_THROWS_AS(Tensor2D(2, 2, std::vector<float>(3)), hl::ShapeError);
}

TEST_CASE("softmax closed forms") {
    const std::vector<float> zeros(4, 0.0f);
    for (float p : hl::softmax_row(zeros)) CHECK(p == doctest::Approx(0.25).epsilon(1e-7));
    const std::vector<float> v{std::log(2.0f), 0, 0, 0};
    const auto p = hl::softmax_row(v);
    CHECK(p[0] == doctest::Approx(0.4).epsilon(1e-6));
    for (int i = 1; i < 4; ++i) CHECK(p[i] == doctest::Approx(0.2).epsilon(1e-6));
    CHECK_THROWS_AS(hl::softmax_row(std::vector<float>{}), hl::ShapeError);
}

TEST_CASE("softmax matches extended-precision oracle") {
    ref::Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<float> v(16);
        for (auto& x : v) x = static_cast<float>(rng.normal(3.0));
        const auto p = hl::softmax_row(v);
        long double mx = v[0];
        for (float x : v) mx = std::max<long double>(mx, x);
        long double sum = 0;
        for (float x : v) sum += std::exp(static_cast<long double>(x) - mx);
        for (std::size_t i = 0; i < v.size(); ++i) {
            const long double want = std::exp(static_cast<long double>(v[i]) - mx) / sum;
            CHECK(std::fabs(static_cast<double>(p[i] - want)) < 1e-7);
        }
    }
}

TEST_CASE("softmax properties") {
    ref::Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<float> v(1 + rng.index(40));
        for (auto& x : v) x = static_cast<float>(rng.uniform(-1e4, 1e4));
        const auto p = hl::softmax_row(v);
        double sum = 0.0;
        for (float x : p) {
            CHECK(x >= 0.0f);
            CHECK(std::isfinite(x));
            sum += x;
        }
        CHECK(std::fabs(sum - 1.0) < 1e-6);
        for (std::size_t i = 0; i < v.size(); ++i)
            for (std::size_t j = 0; j < v.size(); ++j)
                if (v[i] > v[j]) CHECK(p[i] >= p[j]);
    }
    // Shift invariance.
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<float> v(12), w(12);
        const float shift = static_cast<float>(rng.uniform(-50, 50));
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = static_cast<float>(rng.normal(2.0));
            w[i] = v[i] + shift;
        }
        CHECK(ref::max_abs_diff(hl::softmax_row(v), hl::softmax_row(w)) < 1e-6);
    }
    // Strict order preservation at moderate magnitudes.
    const std::vector<float> o{0.5f, -1.0f, 2.0f, 0.0f};
    const auto po = hl::softmax_row(o);
    CHECK(po[2] > po[0]);
    CHECK(po[0] > po[3]);
    CHECK(po[3] > po[1]);
}

TEST_CASE("log_softmax matches log of softmax") {
    ref::Rng rng(9);
    std::vector<float> v(20);
    for (auto& x : v) x = static_cast<float>(rng.normal(2.0));
    const auto ls = hl::log_softmax_row(v);
    const auto oracle = ref::log_softmax(ref::Vec(v.begin(), v.end()));
    CHECK(ref::max_abs_diff(ls, oracle) < 1e-6);
}

TEST_CASE("layernorm examples") {
    const std::vector<float> ones(8, 1.0f), zeros(8, 0.0f);
    const std::vector<float> constant(8, 3.5f);
    for (float x : hl::layernorm(constant, ones, zeros)) CHECK(x == 0.0f);

    const std::vector<float> g2(2, 1.0f), b2(2, 0.0f);
    const auto r = hl::layernorm(std::vector<float>{1, -1}, g2, b2);
    const double s = 1.0 / std::sqrt(1.0 + 1e-5);
    CHECK(r[0] == doctest::Approx(s).epsilon(1e-6));
    CHECK(r[1] == doctest::Approx(-s).epsilon(1e-6));

    CHECK_THROWS_AS(hl::layernorm(std::vector<float>{1, 2, 3}, g2, b2), hl::ShapeError);
}

TEST_CASE("layernorm matches direct formula") {
    ref::Rng rng(21);
    const auto v = ref::random_tensor(rng, 1, 32, 2.0);
    const auto g = ref::random_tensor(rng, 1, 32);
    const auto b = ref::random_tensor(rng, 1, 32);
    const auto out = hl::layernorm(v.row(0), g.row(0), b.row(0));
    const auto want = ref::layernorm(ref::row_of(v, 0), g, b, 1e-5);
    CHECK(ref::max_abs_diff(out, want) < 1e-6);
}

TEST_CASE("gelu tanh approximation") {
    for (double x : {-3.0, -1.0, -0.1, 0.0, 0.5, 1.0, 2.5}) {
        CHECK(hl::gelu(static_cast<float>(x)) == doctest::Approx(ref::gelu(x)).epsilon(1e-6));
    }
}

TEST_CASE("element-wise helpers") {
    auto a = Tensor2D::from_rows({{1, 2}, {3, 4}});
    hl::add_inplace(a, Tensor2D::from_rows({{1, 1}, {1, 1}}));
    CHECK(a == Tensor2D::from_rows({{2, 3}, {4, 5}}));
    hl::add_row_bias(a, std::vector<float>{10, 20});
    CHECK(a == Tensor2D::from_rows({{12, 23}, {14, 25}}));
    hl::scale_inplace(a.data(), 0.5f);
    CHECK(a == Tensor2D::from_rows({{6, 11.5f}, {7, 12.5f}}));
    CHECK_THROWS_AS(hl::add_inplace(a, Tensor2D(1, 2)), hl::ShapeError);
    CHECK_THROWS_AS(hl::add_row_bias(a, std::vector<float>{1}), hl::ShapeError);
    CHECK_THROWS_AS(Tensor2D::from_rows({{1, 2}, {3}}), hl::ShapeError);
}
