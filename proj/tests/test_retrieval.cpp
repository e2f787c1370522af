#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "tokmerge/retrieval.hpp"

using namespace tokmerge;

namespace {

// Independent loss oracle: direct formula in float64, no max subtraction.
double oracle_loss(const Mat& s, double tau) {
    const int b = s.rows;
    double t2v = 0.0, v2t = 0.0;
    for (int i = 0; i < b; ++i) {
        double denom_row = 0.0, denom_col = 0.0;
        for (int j = 0; j < b; ++j) {
            denom_row += std::exp(double(s.at(i, j)) / tau);
            denom_col += std::exp(double(s.at(j, i)) / tau);
        }
        t2v += -std::log(std::exp(double(s.at(i, i)) / tau) / denom_row);
        v2t += -std::log(std::exp(double(s.at(i, i)) / tau) / denom_col);
    }
    return 0.5 * (t2v / b + v2t / b);
}

// Independent metrics oracle: full sort by (score desc, index asc).
RetrievalMetrics oracle_metrics(const Mat& s, bool t2v) {
    const int b = s.rows;
    RetrievalMetrics m;
    long rank_sum = 0;
    int h1 = 0, h5 = 0, h10 = 0;
    for (int q = 0; q < b; ++q) {
        std::vector<std::pair<float, int>> scored;
        for (int j = 0; j < b; ++j) scored.push_back({t2v ? s.at(q, j) : s.at(j, q), j});
        std::stable_sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
            if (x.first != y.first) return x.first > y.first;
            return x.second < y.second;
        });
        int rank = 0;
        for (int pos = 0; pos < b; ++pos) {
            if (scored[pos].second == q) {
                rank = pos + 1;
                break;
            }
        }
        rank_sum += rank;
        h1 += rank <= 1;
        h5 += rank <= 5;
        h10 += rank <= 10;
    }
    m.r1 = 100.0 * h1 / b;
    m.r5 = 100.0 * h5 / b;
    m.r10 = 100.0 * h10 / b;
    m.rsum = m.r1 + m.r5 + m.r10;
    m.mean_rank = double(rank_sum) / b;
    return m;
}

SimilarityMatrix random_sim(Rng& rng, int b, float tau) {
    SimilarityMatrix sim;
    sim.tau = tau;
    sim.s = Mat(b, b);
    for (float& v : sim.s.data) v = 2.0f * static_cast<float>(rng.uniform()) - 1.0f;
    return sim;
}

}  // namespace

TEST_CASE("contrastive loss: uniform matrix gives ln B") {
    SimilarityMatrix sim;
    sim.tau = 0.3f;
    sim.s = Mat(4, 4);
    for (float& v : sim.s.data) v = 0.25f;
    const ContrastiveLoss loss = contrastive_loss(sim);
    CHECK(loss.total == doctest::Approx(std::log(4.0)).epsilon(1e-6));
    CHECK(loss.t2v == doctest::Approx(std::log(4.0)).epsilon(1e-6));
}

TEST_CASE("contrastive loss: sharp diagonal at low temperature") {
    SimilarityMatrix sim;
    sim.tau = 0.05f;
    sim.s = Mat(2, 2, {1, 0, 0, 1});
    const ContrastiveLoss loss = contrastive_loss(sim);
    const double expect = std::log(1.0 + std::exp(-20.0));  // ~2.06e-9
    CHECK(loss.total == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("contrastive loss: permutation equivariance and contracts") {
    Rng rng(1);
    SimilarityMatrix sim = random_sim(rng, 5, 0.4f);
    const double base = contrastive_loss(sim).total;
    const std::vector<int> perm = {3, 0, 4, 1, 2};
    SimilarityMatrix permuted;
    permuted.tau = sim.tau;
    permuted.s = Mat(5, 5);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) permuted.s.at(i, j) = sim.s.at(perm[i], perm[j]);
    CHECK(contrastive_loss(permuted).total == doctest::Approx(base).epsilon(1e-9));

    sim.tau = 0.0f;
    CHECK_THROWS_AS(contrastive_loss(sim), ContractViolation);
    SimilarityMatrix tiny;
    tiny.tau = 1.0f;
    tiny.s = Mat(1, 1, {1.0f});
    CHECK_THROWS_AS(contrastive_loss(tiny), ContractViolation);
}

TEST_CASE("loss_grad: softmax structure on a uniform matrix") {
    SimilarityMatrix sim;
    sim.tau = 0.5f;
    sim.s = Mat(4, 4);
    for (float& v : sim.s.data) v = 0.1f;
    const Mat g = loss_grad(sim);
    for (int i = 0; i < 4; ++i) {
        double row = 0.0, col = 0.0;
        for (int j = 0; j < 4; ++j) {
            row += g.at(i, j);
            col += g.at(j, i);
        }
        CHECK(std::abs(row) < 1e-6);
        CHECK(std::abs(col) < 1e-6);
        CHECK(g.at(i, i) < 0.0f);
    }
}

TEST_CASE("loss_grad matches central finite differences") {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const int b = rng.uniform_int(2, 9);
        const float tau = 0.5f + 1.5f * static_cast<float>(rng.uniform());
        SimilarityMatrix sim = random_sim(rng, b, tau);
        const Mat g = loss_grad(sim);
        const double h = 1e-5;
        for (int probe = 0; probe < 6; ++probe) {
            const int i = rng.uniform_int(0, b), j = rng.uniform_int(0, b);
            Mat up = sim.s, down = sim.s;
            up.at(i, j) += static_cast<float>(h);
            down.at(i, j) -= static_cast<float>(h);
            // divide by the step float32 actually realized
            const double actual = double(up.at(i, j)) - double(down.at(i, j));
            const double fd = (oracle_loss(up, tau) - oracle_loss(down, tau)) / actual;
            CHECK(std::abs(g.at(i, j) - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST_CASE("loss_grad magnitude scales as 1/tau for large tau") {
    Rng rng(3);
    SimilarityMatrix sim = random_sim(rng, 6, 50.0f);
    const Mat g1 = loss_grad(sim);
    sim.tau = 100.0f;
    const Mat g2 = loss_grad(sim);
    double n1 = 0.0, n2 = 0.0;
    for (size_t i = 0; i < g1.data.size(); ++i) {
        n1 += double(g1.data[i]) * g1.data[i];
        n2 += double(g2.data[i]) * g2.data[i];
    }
    CHECK(std::sqrt(n1) / std::sqrt(n2) == doctest::Approx(2.0).epsilon(0.05));
}

TEST_CASE("metrics: diagonal-dominant and worst-case matrices") {
    SimilarityMatrix sim;
    sim.tau = 1.0f;
    sim.s = Mat(6, 6);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) sim.s.at(i, j) = i == j ? 0.9f : 0.1f;
    RetrievalMetrics m = retrieval_metrics(sim, Direction::t2v);
    CHECK(m.r1 == 100.0);
    CHECK(m.rsum == 300.0);
    CHECK(m.mean_rank == 1.0);

    sim.s = Mat(10, 10);
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 10; ++j) sim.s.at(i, j) = i == j ? 0.0f : 1.0f;
    m = retrieval_metrics(sim, Direction::t2v);
    CHECK(m.r1 == 0.0);
    CHECK(m.r5 == 0.0);
    CHECK(m.r10 == 100.0);
    CHECK(m.mean_rank == 10.0);
}

TEST_CASE("metrics: tie-break prefers the earlier index") {
    SimilarityMatrix sim;
    sim.tau = 1.0f;
    sim.s = Mat(4, 4);
    for (float& v : sim.s.data) v = 0.5f;
    const RetrievalMetrics m = retrieval_metrics(sim, Direction::t2v);
    // query q ranks q+1: mean of 1,2,3,4
    CHECK(m.mean_rank == doctest::Approx(2.5));
}

TEST_CASE("metrics match the sort oracle on random matrices") {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        const int b = rng.uniform_int(1, 9);
        SimilarityMatrix sim = random_sim(rng, b, 1.0f);
        for (const Direction dir : {Direction::t2v, Direction::v2t}) {
            const RetrievalMetrics got = retrieval_metrics(sim, dir);
            const RetrievalMetrics want = oracle_metrics(sim.s, dir == Direction::t2v);
            CHECK(got.r1 == want.r1);
            CHECK(got.r5 == want.r5);
            CHECK(got.r10 == want.r10);
            CHECK(got.mean_rank == doctest::Approx(want.mean_rank));
        }
    }
}

TEST_CASE("similarity matrix is invariant to positive rescaling") {
    Rng rng(5);
    const int b = 4, e = 8;
    std::vector<std::vector<float>> text(b), video(b);
    for (int i = 0; i < b; ++i) {
        for (int c = 0; c < e; ++c) {
            text[i].push_back(rng.normal());
            video[i].push_back(rng.normal());
        }
    }
    const SimilarityMatrix base = similarity_matrix(text, video, 0.05f);
    std::vector<std::vector<float>> scaled = video;
    for (auto& v : scaled)
        for (float& x : v) x *= 37.5f;
    const SimilarityMatrix after = similarity_matrix(text, scaled, 0.05f);
    for (size_t i = 0; i < base.s.data.size(); ++i) {
        CHECK(std::abs(base.s.data[i] - after.s.data[i]) < 1e-6f);
    }
    CHECK(contrastive_loss(base).total == doctest::Approx(contrastive_loss(after).total).epsilon(1e-6));
}

TEST_CASE("duplicated pair contributes symmetrically to the gradient") {
    Rng rng(6);
    SimilarityMatrix sim = random_sim(rng, 4, 0.7f);
    // make pairs 0 and 1 identical in every respect
    for (int j = 0; j < 4; ++j) sim.s.at(1, j) = sim.s.at(0, j);
    for (int i = 0; i < 4; ++i) sim.s.at(i, 1) = sim.s.at(i, 0);
    sim.s.at(1, 1) = sim.s.at(0, 0);
    sim.s.at(0, 1) = sim.s.at(0, 0);
    sim.s.at(1, 0) = sim.s.at(0, 0);
    const Mat g = loss_grad(sim);
    CHECK(g.at(0, 2) == doctest::Approx(g.at(1, 2)).epsilon(1e-6));
    CHECK(g.at(2, 0) == doctest::Approx(g.at(2, 1)).epsilon(1e-6));
    CHECK(g.at(0, 0) == doctest::Approx(g.at(1, 1)).epsilon(1e-6));
}
