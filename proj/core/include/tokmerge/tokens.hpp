#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tokmerge/numerics.hpp"

namespace tokmerge {

// Where a token came from in the original frame grid. slot 0 is the CLS slot,
// slots 1..N-1 are patch slots (patch index = slot - 1).
struct TokenOrigin {
    int32_t frame = 0;
    int32_t slot = 0;
    friend bool operator==(const TokenOrigin& a, const TokenOrigin& b) {
        return a.frame == b.frame && a.slot == b.slot;
    }
    friend bool operator<(const TokenOrigin& a, const TokenOrigin& b) {
        return a.frame != b.frame ? a.frame < b.frame : a.slot < b.slot;
    }
};

// A variable-length set of tokens with per-token merge bookkeeping.
// Values are immutable by convention: every operation returns a new set.
//
// Invariants (checked by validate()):
//   - features is T x D with all per-vector metadata of length T
//   - sizes are positive and each token's size equals its origin count
//   - origins are disjoint across tokens
struct TokenSet {
    Mat features;                                  // T x D
    std::vector<int> sizes;                        // original tokens folded into each token
    std::vector<int> clip_ids;                     // clip membership
    std::vector<std::vector<TokenOrigin>> origins; // sorted per token
    std::vector<uint8_t> is_cls;

    int count() const { return features.rows; }
    int width() const { return features.cols; }
    long total_size() const;
    int cls_count() const;
    void validate() const;
};

// One fresh frame: CLS token followed by patch tokens, all size 1.
TokenSet make_frame_tokens(const Mat& frame_features, int frame_index, int clip_id);

// Concatenates sets in the given order, preserving token order within each.
TokenSet concat_token_sets(const std::vector<TokenSet>& sets);

// Pairs to merge: every source index is distinct and no source is also a
// destination (several sources may share a destination).
struct MergePair {
    int src = 0;
    int dst = 0;
};
struct MergePlan {
    std::vector<MergePair> pairs;
    size_t size() const { return pairs.size(); }
};

// Even positions -> A, odd -> B, in current token order. Requires >= 2 tokens.
std::pair<std::vector<int>, std::vector<int>> alternating_partition(const TokenSet& ts);

// Bipartite soft matching: each A-token is matched to its most similar
// B-token by cosine similarity; the merge_count best-matched A-tokens become
// sources. Ties break toward the lower token index, which makes the plan a
// pure function of the features. When protect_cls is set (the default
// everywhere in the encoder), CLS tokens are neither sources nor
// destinations.
MergePlan bipartite_soft_match(const TokenSet& ts, int merge_count, bool protect_cls = true);

// Row-combination view of a merge: output row r is the weighted sum of the
// listed (source row, weight) terms. Shared by apply_merge and the traced
// gradient path so both compute bit-identical features.
struct MergeRowsSpec {
    std::vector<std::vector<std::pair<int, float>>> rows;
    std::vector<int> sizes;
    std::vector<int> clip_ids;
    std::vector<std::vector<TokenOrigin>> origins;
    std::vector<uint8_t> is_cls;
};
MergeRowsSpec merge_rows_spec(const TokenSet& ts, const MergePlan& plan, bool size_weighted = true);

// out.row(r) = sum of weight * x.row(src) over spec.rows[r], float64 accumulation.
Mat apply_rows_spec(const Mat& x, const std::vector<std::vector<std::pair<int, float>>>& rows);

// Folds every source into its destination. With size_weighted (default) the
// destination feature is the size-weighted mean of the group, so the total
// weighted feature mass is conserved; the plain mean is kept for ablation.
// Destination size/origins take the group sums/unions; surviving tokens keep
// their relative order.
TokenSet apply_merge(const TokenSet& ts, const MergePlan& plan, bool size_weighted = true);

// JSON document mapping each final token to its origin patches, for external
// overlay plotting. Patch indices are slot-1; the CLS slot exports as -1.
std::string merge_map_json(const TokenSet& ts, int frame_count, int tokens_per_frame);

}  // namespace tokmerge
