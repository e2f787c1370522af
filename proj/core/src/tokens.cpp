#include "tokmerge/tokens.hpp"

#include <algorithm>
#include <set>

#include "json.hpp"

namespace tokmerge {

long TokenSet::total_size() const {
    long s = 0;
    for (int v : sizes) s += v;
    return s;
}

int TokenSet::cls_count() const {
    int n = 0;
    for (uint8_t f : is_cls) n += f != 0;
    return n;
}

void TokenSet::validate() const {
    const size_t t = static_cast<size_t>(count());
    require(sizes.size() == t && clip_ids.size() == t && origins.size() == t && is_cls.size() == t,
            "TokenSet: metadata length mismatch");
    std::set<std::pair<int32_t, int32_t>> seen;
    for (size_t i = 0; i < t; ++i) {
        require(sizes[i] > 0, "TokenSet: non-positive size");
        require(static_cast<size_t>(sizes[i]) == origins[i].size(), "TokenSet: size != origin count");
        for (const TokenOrigin& o : origins[i]) {
            require(seen.insert({o.frame, o.slot}).second, "TokenSet: duplicate origin");
        }
    }
}

TokenSet make_frame_tokens(const Mat& frame_features, int frame_index, int clip_id) {
    require(frame_features.rows >= 1, "make_frame_tokens: empty frame");
    TokenSet ts;
    ts.features = frame_features;
    const int n = frame_features.rows;
    ts.sizes.assign(n, 1);
    ts.clip_ids.assign(n, clip_id);
    ts.is_cls.assign(n, 0);
    ts.is_cls[0] = 1;  // slot 0 is CLS
    ts.origins.resize(n);
    for (int i = 0; i < n; ++i) ts.origins[i] = {TokenOrigin{frame_index, i}};
    return ts;
}

TokenSet concat_token_sets(const std::vector<TokenSet>& sets) {
    require(!sets.empty(), "concat_token_sets: no sets");
    const int d = sets[0].width();
    int total = 0;
    for (const TokenSet& s : sets) {
        require(s.width() == d, "concat_token_sets: width mismatch");
        total += s.count();
    }
    TokenSet out;
    out.features = Mat(total, d);
    out.sizes.reserve(total);
    out.clip_ids.reserve(total);
    out.origins.reserve(total);
    out.is_cls.reserve(total);
    int row = 0;
    for (const TokenSet& s : sets) {
        std::copy(s.features.data.begin(), s.features.data.end(), out.features.row(row));
        row += s.count();
        out.sizes.insert(out.sizes.end(), s.sizes.begin(), s.sizes.end());
        out.clip_ids.insert(out.clip_ids.end(), s.clip_ids.begin(), s.clip_ids.end());
        out.origins.insert(out.origins.end(), s.origins.begin(), s.origins.end());
        out.is_cls.insert(out.is_cls.end(), s.is_cls.begin(), s.is_cls.end());
    }
    return out;
}

std::pair<std::vector<int>, std::vector<int>> alternating_partition(const TokenSet& ts) {
    require(ts.count() >= 2, "alternating_partition: need at least 2 tokens");
    std::vector<int> a, b;
    a.reserve((ts.count() + 1) / 2);
    b.reserve(ts.count() / 2);
    for (int i = 0; i < ts.count(); ++i) {
        (i % 2 == 0 ? a : b).push_back(i);
    }
    return {a, b};
}

MergePlan bipartite_soft_match(const TokenSet& ts, int merge_count, bool protect_cls) {
    require(merge_count >= 0, "bipartite_soft_match: negative merge_count");
    MergePlan plan;
    if (merge_count == 0) return plan;

    auto [set_a, set_b] = alternating_partition(ts);
    const int d = ts.width();

    struct Candidate {
        float sim;
        int src;
        int dst;
    };
    std::vector<Candidate> candidates;
    candidates.reserve(set_a.size());
    for (int src : set_a) {
        if (protect_cls && ts.is_cls[src]) continue;
        int best = -1;
        float best_sim = 0.0f;
        for (int dst : set_b) {
            if (protect_cls && ts.is_cls[dst]) continue;
            const float s = cosine_sim(ts.features.row(src), ts.features.row(dst), d);
            if (best < 0 || s > best_sim) {  // ties keep the lower dst index
                best = dst;
                best_sim = s;
            }
        }
        if (best >= 0) candidates.push_back({best_sim, src, best});
    }
    require(static_cast<size_t>(merge_count) <= candidates.size(),
            "bipartite_soft_match: merge_count exceeds eligible source tokens");

    std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& x, const Candidate& y) {
        if (x.sim != y.sim) return x.sim > y.sim;
        return x.src < y.src;
    });
    plan.pairs.reserve(merge_count);
    for (int i = 0; i < merge_count; ++i) plan.pairs.push_back({candidates[i].src, candidates[i].dst});
    return plan;
}

MergeRowsSpec merge_rows_spec(const TokenSet& ts, const MergePlan& plan, bool size_weighted) {
    const int t = ts.count();
    std::vector<uint8_t> removed(t, 0);
    for (const MergePair& p : plan.pairs) {
        require(p.src >= 0 && p.src < t && p.dst >= 0 && p.dst < t, "apply_merge: index out of range");
        require(p.src != p.dst, "apply_merge: source equals destination");
        require(!removed[p.src], "apply_merge: duplicate source");
        removed[p.src] = 1;
    }
    for (const MergePair& p : plan.pairs) {
        require(!removed[p.dst], "apply_merge: destination is also a source");
    }

    // Group members in token order: destination first, then sources ascending.
    std::vector<std::vector<int>> sources(t);
    for (const MergePair& p : plan.pairs) sources[p.dst].push_back(p.src);
    for (auto& v : sources) std::sort(v.begin(), v.end());

    MergeRowsSpec spec;
    const int survivors = t - static_cast<int>(plan.pairs.size());
    spec.rows.reserve(survivors);
    spec.sizes.reserve(survivors);
    spec.clip_ids.reserve(survivors);
    spec.origins.reserve(survivors);
    spec.is_cls.reserve(survivors);

    for (int i = 0; i < t; ++i) {
        if (removed[i]) continue;
        if (sources[i].empty()) {
            spec.rows.push_back({{i, 1.0f}});
            spec.sizes.push_back(ts.sizes[i]);
            spec.origins.push_back(ts.origins[i]);
        } else {
            long total = ts.sizes[i];
            std::vector<TokenOrigin> merged_origins = ts.origins[i];
            for (int s : sources[i]) {
                total += ts.sizes[s];
                merged_origins.insert(merged_origins.end(), ts.origins[s].begin(), ts.origins[s].end());
            }
            std::vector<std::pair<int, float>> terms;
            terms.reserve(sources[i].size() + 1);
            const double denom = size_weighted ? static_cast<double>(total)
                                               : static_cast<double>(sources[i].size() + 1);
            terms.push_back({i, static_cast<float>((size_weighted ? ts.sizes[i] : 1.0) / denom)});
            for (int s : sources[i]) {
                terms.push_back({s, static_cast<float>((size_weighted ? ts.sizes[s] : 1.0) / denom)});
            }
            spec.rows.push_back(std::move(terms));
            std::sort(merged_origins.begin(), merged_origins.end());
            spec.sizes.push_back(static_cast<int>(total));
            spec.origins.push_back(std::move(merged_origins));
        }
        spec.clip_ids.push_back(ts.clip_ids[i]);
        spec.is_cls.push_back(ts.is_cls[i]);
    }
    return spec;
}

Mat apply_rows_spec(const Mat& x, const std::vector<std::vector<std::pair<int, float>>>& rows) {
    Mat out(static_cast<int>(rows.size()), x.cols);
    std::vector<double> acc(x.cols);
    for (size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() == 1 && rows[r][0].second == 1.0f) {
            std::copy(x.row(rows[r][0].first), x.row(rows[r][0].first) + x.cols, out.row(static_cast<int>(r)));
            continue;
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        for (const auto& [src, w] : rows[r]) {
            const float* srow = x.row(src);
            for (int c = 0; c < x.cols; ++c) acc[c] += static_cast<double>(w) * srow[c];
        }
        float* dst = out.row(static_cast<int>(r));
        for (int c = 0; c < x.cols; ++c) dst[c] = static_cast<float>(acc[c]);
    }
    return out;
}

TokenSet apply_merge(const TokenSet& ts, const MergePlan& plan, bool size_weighted) {
    MergeRowsSpec spec = merge_rows_spec(ts, plan, size_weighted);
    TokenSet out;
    out.features = apply_rows_spec(ts.features, spec.rows);
    out.sizes = std::move(spec.sizes);
    out.clip_ids = std::move(spec.clip_ids);
    out.origins = std::move(spec.origins);
    out.is_cls = std::move(spec.is_cls);
    return out;
}

std::string merge_map_json(const TokenSet& ts, int frame_count, int tokens_per_frame) {
    nlohmann::json doc;
    doc["frame_count"] = frame_count;
    doc["patches_per_frame"] = tokens_per_frame - 1;
    doc["final_token_count"] = ts.count();
    nlohmann::json toks = nlohmann::json::array();
    for (int i = 0; i < ts.count(); ++i) {
        nlohmann::json t;
        t["token"] = i;
        t["clip"] = ts.clip_ids[i];
        t["size"] = ts.sizes[i];
        t["is_cls"] = ts.is_cls[i] != 0;
        nlohmann::json org = nlohmann::json::array();
        for (const TokenOrigin& o : ts.origins[i]) {
            org.push_back({o.frame, o.slot - 1});  // patch index; CLS exports as -1
        }
        t["origins"] = org;
        toks.push_back(std::move(t));
    }
    doc["tokens"] = std::move(toks);
    return doc.dump(2);
}

}  // namespace tokmerge
