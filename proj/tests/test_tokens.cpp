#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "tokmerge/tokens.hpp"

using namespace tokmerge;

namespace {

// Exhaustive oracle, written against the stated matching rule only: every
// eligible A-token's best B-match by cosine (ties -> lower B index), then the
// merge_count best-matched sources (ties -> lower source index).
MergePlan oracle_bsm(const TokenSet& ts, int merge_count, bool protect_cls) {
    struct Cand {
        float sim;
        int src, dst;
    };
    std::vector<Cand> cands;
    for (int a = 0; a < ts.count(); ++a) {
        if (a % 2 != 0) continue;  // set A = even positions
        if (protect_cls && ts.is_cls[a]) continue;
        int best = -1;
        float best_sim = 0.0f;
        for (int b = 1; b < ts.count(); b += 2) {  // set B = odd positions
            if (protect_cls && ts.is_cls[b]) continue;
            double dot = 0.0, nu = 0.0, nv = 0.0;
            for (int c = 0; c < ts.width(); ++c) {
                dot += double(ts.features.at(a, c)) * ts.features.at(b, c);
                nu += double(ts.features.at(a, c)) * ts.features.at(a, c);
                nv += double(ts.features.at(b, c)) * ts.features.at(b, c);
            }
            const float s = static_cast<float>(dot / (std::sqrt(nu) * std::sqrt(nv)));
            if (best < 0 || s > best_sim) {
                best = b;
                best_sim = s;
            }
        }
        if (best >= 0) cands.push_back({best_sim, a, best});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
        if (x.sim != y.sim) return x.sim > y.sim;
        return x.src < y.src;
    });
    MergePlan plan;
    for (int i = 0; i < merge_count; ++i) plan.pairs.push_back({cands[i].src, cands[i].dst});
    return plan;
}

// Random token sets with quantized features so exact similarity ties occur
// and the tie-break rules actually get exercised.
TokenSet random_token_set(Rng& rng, int max_tokens = 12) {
    const int t = rng.uniform_int(2, max_tokens + 1);
    const int d = rng.uniform_int(2, 7);
    TokenSet ts;
    ts.features = Mat(t, d);
    for (int i = 0; i < t; ++i) {
        bool nonzero = false;
        for (int j = 0; j < d; ++j) {
            const float q = 0.5f * static_cast<float>(rng.uniform_int(-3, 4));
            ts.features.at(i, j) = q;
            nonzero = nonzero || q != 0.0f;
        }
        if (!nonzero) ts.features.at(i, 0) = 0.5f;
    }
    ts.sizes.resize(t);
    ts.clip_ids.resize(t);
    ts.origins.resize(t);
    ts.is_cls.assign(t, 0);
    for (int i = 0; i < t; ++i) {
        ts.sizes[i] = rng.uniform_int(1, 4);
        ts.clip_ids[i] = rng.uniform_int(0, 3);
        // unique synthetic origins; one origin per size unit
        for (int s = 0; s < ts.sizes[i]; ++s) ts.origins[i].push_back({i, s});
    }
    if (rng.uniform() < 0.7) ts.is_cls[rng.uniform_int(0, t)] = 1;
    return ts;
}

}  // namespace

TEST_CASE("alternating partition") {
    Rng rng(1);
    TokenSet ts = random_token_set(rng);
    while (ts.count() != 4) ts = random_token_set(rng);
    auto [a, b] = alternating_partition(ts);
    CHECK(a == std::vector<int>{0, 2});
    CHECK(b == std::vector<int>{1, 3});

    while (ts.count() != 5) ts = random_token_set(rng);
    std::tie(a, b) = alternating_partition(ts);
    CHECK(a.size() == 3);
    CHECK(b.size() == 2);

    // two clips of 3 tokens concatenated: both clips land in both sets
    Mat f(3, 2);
    for (int i = 0; i < 3; ++i) f.at(i, 0) = 1.0f;
    const TokenSet c0 = make_frame_tokens(f, 0, 0), c1 = make_frame_tokens(f, 1, 1);
    const TokenSet both = concat_token_sets({c0, c1});
    std::tie(a, b) = alternating_partition(both);
    auto clips_in = [&](const std::vector<int>& idx) {
        std::set<int> s;
        for (int i : idx) s.insert(both.clip_ids[i]);
        return s;
    };
    CHECK(clips_in(a) == std::set<int>{0, 1});
    CHECK(clips_in(b) == std::set<int>{0, 1});

    TokenSet single;
    single.features = Mat(1, 2, {1, 0});
    single.sizes = {1};
    single.clip_ids = {0};
    single.origins = {{{0, 0}}};
    single.is_cls = {1};
    CHECK_THROWS_AS(alternating_partition(single), ContractViolation);
}

TEST_CASE("bipartite soft match: trivial cases") {
    Rng rng(2);
    const TokenSet ts = random_token_set(rng);
    CHECK(bipartite_soft_match(ts, 0, true).pairs.empty());

    // duplicate tokens must merge first
    TokenSet dup;
    dup.features = Mat(4, 2, {1, 0, 1, 0, 0, 1, -1, 0.5f});
    dup.sizes = {1, 1, 1, 1};
    dup.clip_ids = {0, 0, 0, 0};
    dup.origins = {{{0, 0}}, {{0, 1}}, {{0, 2}}, {{0, 3}}};
    dup.is_cls = {0, 0, 0, 0};
    const MergePlan plan = bipartite_soft_match(dup, 1, true);
    REQUIRE(plan.pairs.size() == 1);
    CHECK(plan.pairs[0].src == 0);
    CHECK(plan.pairs[0].dst == 1);
}

TEST_CASE("bipartite soft match equals exhaustive oracle") {
    Rng rng(99);
    int checked = 0;
    for (int trial = 0; trial < 400; ++trial) {
        const TokenSet ts = random_token_set(rng);
        int eligible = 0;
        for (int a = 0; a < ts.count(); a += 2) {
            if (ts.is_cls[a]) continue;
            bool has = false;
            for (int b = 1; b < ts.count(); b += 2)
                if (!ts.is_cls[b]) has = true;
            if (has) ++eligible;
        }
        const int merge_count = eligible == 0 ? 0 : rng.uniform_int(0, eligible + 1);
        const MergePlan got = bipartite_soft_match(ts, merge_count, true);
        const MergePlan want = oracle_bsm(ts, merge_count, true);
        REQUIRE(got.pairs.size() == want.pairs.size());
        for (size_t i = 0; i < got.pairs.size(); ++i) {
            CHECK(got.pairs[i].src == want.pairs[i].src);
            CHECK(got.pairs[i].dst == want.pairs[i].dst);
        }
        ++checked;
    }
    CHECK(checked == 400);
}

TEST_CASE("bipartite soft match determinism and contract") {
    Rng rng(5);
    const TokenSet ts = random_token_set(rng);
    const MergePlan p1 = bipartite_soft_match(ts, 1, true);
    const MergePlan p2 = bipartite_soft_match(ts, 1, true);
    REQUIRE(p1.pairs.size() == p2.pairs.size());
    for (size_t i = 0; i < p1.pairs.size(); ++i) {
        CHECK(p1.pairs[i].src == p2.pairs[i].src);
        CHECK(p1.pairs[i].dst == p2.pairs[i].dst);
    }
    CHECK_THROWS_AS(bipartite_soft_match(ts, ts.count(), true), ContractViolation);
}

TEST_CASE("apply_merge: weighted mean, empty plan, conservation") {
    TokenSet ts;
    ts.features = Mat(2, 2, {1.0f, 3.0f, 2.0f, -1.0f});  // a, b
    ts.sizes = {1, 3};
    ts.clip_ids = {0, 0};
    ts.origins = {{{0, 0}}, {{0, 1}, {0, 2}, {0, 3}}};
    ts.is_cls = {0, 0};

    MergePlan plan;
    plan.pairs = {{0, 1}};
    const TokenSet merged = apply_merge(ts, plan);
    REQUIRE(merged.count() == 1);
    CHECK(merged.sizes[0] == 4);
    CHECK(merged.features.at(0, 0) == doctest::Approx((1.0 + 3 * 2.0) / 4).epsilon(1e-6));
    CHECK(merged.features.at(0, 1) == doctest::Approx((3.0 + 3 * -1.0) / 4).epsilon(1e-6));
    CHECK(merged.origins[0].size() == 4);

    const TokenSet same = apply_merge(ts, MergePlan{});
    CHECK(same.features.data == ts.features.data);
    CHECK(same.sizes == ts.sizes);
}

TEST_CASE("merge sequences conserve mass, sizes and origin partition") {
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        TokenSet ts = random_token_set(rng, 12);
        const long total_size = ts.total_size();
        std::vector<double> mass(ts.width(), 0.0);
        for (int i = 0; i < ts.count(); ++i)
            for (int c = 0; c < ts.width(); ++c) mass[c] += double(ts.sizes[i]) * ts.features.at(i, c);
        std::multiset<std::pair<int, int>> universe;
        for (const auto& org : ts.origins)
            for (const TokenOrigin& o : org) universe.insert({o.frame, o.slot});

        // several merge rounds
        for (int round = 0; round < 3 && ts.count() >= 2; ++round) {
            int eligible = 0;
            for (int a = 0; a < ts.count(); a += 2) {
                if (ts.is_cls[a]) continue;
                bool has = false;
                for (int b = 1; b < ts.count(); b += 2)
                    if (!ts.is_cls[b]) has = true;
                if (has) ++eligible;
            }
            if (eligible == 0) break;
            const int m = rng.uniform_int(0, eligible + 1);
            const MergePlan plan = bipartite_soft_match(ts, m, true);
            const int before = ts.count();
            ts = apply_merge(ts, plan);
            CHECK(ts.count() == before - static_cast<int>(plan.pairs.size()));
        }

        CHECK(ts.total_size() == total_size);
        std::vector<double> mass_after(ts.width(), 0.0);
        for (int i = 0; i < ts.count(); ++i)
            for (int c = 0; c < ts.width(); ++c)
                mass_after[c] += double(ts.sizes[i]) * ts.features.at(i, c);
        for (int c = 0; c < ts.width(); ++c) {
            CHECK(std::abs(mass_after[c] - mass[c]) <= 1e-5 * std::max(1.0, std::abs(mass[c])));
        }
        std::multiset<std::pair<int, int>> universe_after;
        for (const auto& org : ts.origins)
            for (const TokenOrigin& o : org) universe_after.insert({o.frame, o.slot});
        CHECK(universe_after == universe);
        ts.validate();
    }
}

TEST_CASE("plain-average ablation mode") {
    TokenSet ts;
    ts.features = Mat(2, 1, {1.0f, 5.0f});
    ts.sizes = {1, 3};
    ts.clip_ids = {0, 0};
    ts.origins = {{{0, 0}}, {{0, 1}, {0, 2}, {0, 3}}};
    ts.is_cls = {0, 0};
    MergePlan plan;
    plan.pairs = {{0, 1}};
    const TokenSet merged = apply_merge(ts, plan, /*size_weighted=*/false);
    CHECK(merged.features.at(0, 0) == doctest::Approx(3.0).epsilon(1e-6));  // (1+5)/2
    CHECK(merged.sizes[0] == 4);  // sizes still sum
}

TEST_CASE("merge map export covers all patches exactly once") {
    Mat f(4, 3);
    Rng rng(8);
    for (float& v : f.data) v = rng.normal();
    const TokenSet a = make_frame_tokens(f, 0, 0);
    const TokenSet b = make_frame_tokens(f, 1, 1);
    TokenSet both = concat_token_sets({a, b});
    both = apply_merge(both, bipartite_soft_match(both, 2, true));
    const std::string doc = merge_map_json(both, 2, 4);
    CHECK(doc.find("\"origins\"") != std::string::npos);
    CHECK(doc.find("\"frame_count\": 2") != std::string::npos);
}
