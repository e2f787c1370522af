#pragma once

#include <string>
#include <vector>

#include "tokmerge/config.hpp"

namespace tokmerge {

struct MergeStep {
    int layer = 0;       // 1-based layer index where the step happens
    int clip_count = 0;  // clips remaining after this step
};

// Where and how much merging happens per layer.
//
// Layers [1, start_clip) run the per-frame image-merge block with img_r.
// Layers [start_clip, num_layers] run the clip-merge block: at a step layer
// groups of adjacent clips are fused (cross keep fraction keep_cross, then
// intra keep fraction keep_intra); at a non-step layer cross-merge is skipped
// and intra-merge applies when gap_intra/tail_intra allows.
struct MergeSchedule {
    static constexpr int kNoClipStage = 1 << 20;

    int frame_count = 0;
    int img_r = 0;            // tokens merged per image-merge layer
    double keep_cross = 1.0;  // R_C
    double keep_intra = 1.0;  // R_I
    int start_clip = kNoClipStage;  // resolved at parse; kNoClipStage = image layers only
    bool gap_intra = true;    // intra-merge in non-step layers between steps
    bool tail_intra = true;   // intra-merge in layers after the final step
    std::vector<MergeStep> steps;

    bool has_clip_steps() const { return !steps.empty(); }
    // Group size (clips fused per new clip) at step index k.
    int group_size(size_t k) const;
    void validate() const;
    void validate_against(const ModelConfig& cfg) const;
    std::string to_string() const;
};

// Grammar: F[@L1:C1[@L2:C2...]] followed by whitespace-separated options
//   r=INT Rc=FLOAT Ri=FLOAT start=INT tail=0|1 gap=0|1
// Example: "12@9:6@10:3@11:1 r=2 Rc=0.7 Ri=0.9". start defaults to the first
// step layer. Throws ScheduleParseError with the offending position.
MergeSchedule parse_schedule(const std::string& text);

enum class LayerKind {
    image_merge,  // per-frame block, merges img_r tokens
    clip_step,    // cross-clip + intra-clip merge
    clip_pass,    // clip block with cross-merge skipped
};

struct LayerCounts {
    int layer = 0;  // 1-based
    LayerKind kind = LayerKind::image_merge;
    int clip_count = 0;          // clips during this layer's attention
    int group_size = 1;          // clips fused at this layer (1 if none)
    int tokens_after_cross = 0;  // per-clip tokens entering attention
    int tokens_after_intra = 0;  // per-clip tokens entering the FFN
    int attention_capacity = 0;  // max tokens in any single attention call
};

struct TokenCountReport {
    std::vector<LayerCounts> layers;
    int final_clip_count = 0;
    int final_tokens_per_clip = 0;
    long final_token_count = 0;   // summed over clips
    double final_fraction = 0.0;  // vs F * N input tokens
    int max_attention_capacity = 0;
    int max_attention_layer = 0;

    std::string to_table() const;
    std::string to_json() const;
};

// Exact per-layer token arithmetic. Merged counts use ceiling on the KEPT
// tokens: kept = ceil(n * R), merged = n - kept. Throws InfeasibleSchedule
// when any layer would leave no more tokens than the protected CLS count.
TokenCountReport predict_token_counts(const ModelConfig& cfg, const MergeSchedule& sched);

// ceil(n * keep) with a 1e-9 slack; the single rounding rule shared by the
// predictor and the live encoder.
int kept_token_count(int n, double keep);

}  // namespace tokmerge
