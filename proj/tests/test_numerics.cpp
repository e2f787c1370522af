#include <cmath>

#include "doctest.h"
#include "tokmerge/numerics.hpp"

using namespace tokmerge;

namespace {

// Independent oracle: plain i-j-k triple loop with float64 accumulation.
Mat naive_matmul(const Mat& a, const Mat& b) {
    Mat out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k) acc += static_cast<double>(a.at(i, k)) * b.at(k, j);
            out.at(i, j) = static_cast<float>(acc);
        }
    }
    return out;
}

Mat random_mat(Rng& rng, int r, int c) { return rng.gaussian(r, c, 1.0f); }

double max_abs_diff(const Mat& a, const Mat& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(double(a.data[i]) - b.data[i]));
    return m;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
    Mat id(3, 3);
    for (int i = 0; i < 3; ++i) id.at(i, i) = 1.0f;
    Rng rng(7);
    const Mat m = random_mat(rng, 3, 5);
    const Mat out = matmul(id, m);
    CHECK(max_abs_diff(out, m) == 0.0);

    const Mat a(2, 2, {1, 2, 3, 4});
    const Mat b(2, 1, {1, 1});
    const Mat c = matmul(a, b);
    CHECK(c.at(0, 0) == 3.0f);
    CHECK(c.at(1, 0) == 7.0f);
}

TEST_CASE("matmul matches naive oracle on random 8x8") {
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        const Mat a = random_mat(rng, 8, 8);
        const Mat b = random_mat(rng, 8, 8);
        CHECK(max_abs_diff(matmul(a, b), naive_matmul(a, b)) < 1e-6);
    }
}

TEST_CASE("matmul shape contract") {
    CHECK_THROWS_AS(matmul(Mat(2, 3), Mat(2, 2)), ContractViolation);
}

TEST_CASE("matmul associativity vs oracle on random small shapes") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const int m = rng.uniform_int(1, 6), k = rng.uniform_int(1, 6);
        const int n = rng.uniform_int(1, 6), p = rng.uniform_int(1, 6);
        const Mat a = random_mat(rng, m, k), b = random_mat(rng, k, n), c = random_mat(rng, n, p);
        const Mat left = matmul(matmul(a, b), c);
        const Mat right = matmul(a, matmul(b, c));
        for (size_t i = 0; i < left.data.size(); ++i) {
            CHECK(std::abs(left.data[i] - right.data[i]) <=
                  1e-5 * std::max(1.0f, std::abs(right.data[i])));
        }
    }
}

TEST_CASE("softmax rows: symmetry, stability, scalar oracle") {
    const Mat z(1, 3, {0, 0, 0});
    Mat s = softmax_rows(z);
    for (int j = 0; j < 3; ++j) CHECK(s.at(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-6));

    const Mat big(1, 2, {1000, 0});
    s = softmax_rows(big);
    CHECK(s.at(0, 0) == doctest::Approx(1.0));
    CHECK(s.at(0, 1) == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(all_finite(s));

    // exp(1),exp(2),exp(3) normalized, evaluated independently.
    const Mat row(1, 3, {1, 2, 3});
    s = softmax_rows(row);
    CHECK(s.at(0, 0) == doctest::Approx(0.09003).epsilon(1e-3));
    CHECK(s.at(0, 1) == doctest::Approx(0.24473).epsilon(1e-3));
    CHECK(s.at(0, 2) == doctest::Approx(0.66524).epsilon(1e-3));
}

TEST_CASE("softmax rows sum to 1 for extreme magnitudes") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        Mat m = random_mat(rng, 4, 7);
        for (float& v : m.data) v *= 500.0f;
        const Mat s = softmax_rows(m);
        CHECK(all_finite(s));
        for (int i = 0; i < s.rows; ++i) {
            double sum = 0.0;
            for (int j = 0; j < s.cols; ++j) {
                sum += s.at(i, j);
                CHECK(s.at(i, j) >= 0.0f);
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("layer_norm: constant row, already-normalized row, formula oracle") {
    const std::vector<float> gamma(4, 1.0f), beta(4, 0.0f);
    const Mat constant(1, 4, {5, 5, 5, 5});
    Mat out = layer_norm(constant, gamma, beta);
    for (int j = 0; j < 4; ++j) CHECK(std::abs(out.at(0, j)) < 1e-4);

    const std::vector<float> g2(2, 1.0f), b2(2, 0.0f);
    const Mat pm(1, 2, {1, -1});
    out = layer_norm(pm, g2, b2);
    CHECK(out.at(0, 0) == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(out.at(0, 1) == doctest::Approx(-1.0).epsilon(1e-4));

    Rng rng(5);
    const Mat row = random_mat(rng, 1, 16);
    out = layer_norm(row, std::vector<float>(16, 1.0f), std::vector<float>(16, 0.0f));
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < 16; ++j) mean += out.at(0, j);
    mean /= 16;
    for (int j = 0; j < 16; ++j) var += (out.at(0, j) - mean) * (out.at(0, j) - mean);
    var /= 16;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("gelu and cosine similarity") {
    CHECK(gelu_scalar(0.0f) == 0.0f);
    CHECK(gelu_scalar(10.0f) == doctest::Approx(10.0).epsilon(1e-4));

    const std::vector<float> u = {1, 2, 3}, two_u = {2, 4, 6};
    CHECK(cosine_sim(u, u) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(cosine_sim(u, two_u) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(cosine_sim({1, 0}, {0, 1}) == doctest::Approx(0.0));
    CHECK_THROWS_AS(cosine_sim({0, 0}, {1, 1}), ContractViolation);
}

TEST_CASE("cosine similarity positive-scale invariance") {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = rng.uniform_int(2, 8);
        std::vector<float> u(n), v(n);
        for (auto& x : u) x = rng.normal();
        for (auto& x : v) x = rng.normal();
        const float base = cosine_sim(u, v);
        const float a = 0.01f + 10.0f * static_cast<float>(rng.uniform());
        const float b = 0.01f + 10.0f * static_cast<float>(rng.uniform());
        std::vector<float> au(n), bv(n);
        for (int i = 0; i < n; ++i) au[i] = a * u[i];
        for (int i = 0; i < n; ++i) bv[i] = b * v[i];
        CHECK(std::abs(cosine_sim(au, bv) - base) < 1e-6);
    }
}

TEST_CASE("kernels are bit-identical across runs") {
    Rng rng(123);
    const Mat a = random_mat(rng, 6, 6);
    const Mat b = random_mat(rng, 6, 6);
    const Mat m1 = matmul(a, b);
    const Mat m2 = matmul(a, b);
    CHECK(m1.data == m2.data);
    const Mat s1 = softmax_rows(a);
    const Mat s2 = softmax_rows(a);
    CHECK(s1.data == s2.data);

    Rng r1(77), r2(77);
    for (int i = 0; i < 100; ++i) CHECK(r1.next_u64() == r2.next_u64());
    Rng g1(77), g2(77);
    for (int i = 0; i < 100; ++i) CHECK(g1.normal() == g2.normal());
}
