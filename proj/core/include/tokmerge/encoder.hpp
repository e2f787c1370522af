#pragma once

#include <optional>
#include <vector>

#include "tokmerge/config.hpp"
#include "tokmerge/schedule.hpp"
#include "tokmerge/tokens.hpp"

namespace tokmerge {

// One pre-norm transformer layer: ln1 -> MHSA -> residual, ln2 -> FFN -> residual.
struct LayerWeights {
    std::vector<float> ln1_gamma, ln1_beta;
    Mat wq, wk, wv, wo;              // D x D
    std::vector<float> bq, bk, bv, bo;
    std::vector<float> ln2_gamma, ln2_beta;
    Mat w_fc1, w_fc2;                // D x ffn, ffn x D
    std::vector<float> b_fc1, b_fc2;
};

struct VisualTower {
    Mat patch_proj;  // (patch_pixels * 3) x D; carried for the on-disk format
    std::vector<LayerWeights> layers;
    std::vector<float> ln_final_gamma, ln_final_beta;
    Mat proj;  // D x embed_dim
};

struct TextTower {
    Mat token_embedding;  // vocab x D
    Mat pos_embedding;    // max_len x D
    std::vector<LayerWeights> layers;
    std::vector<float> ln_final_gamma, ln_final_beta;
    Mat proj;  // D x embed_dim
};

struct EncoderWeights {
    VisualTower visual;
    TextTower text;
};

// Rank decomposition per attention projection: delta = alpha * down * up,
// down is D x rank (Gaussian init), up is rank x D (zero init, so the model
// starts exactly at the frozen backbone).
struct LoraLayer {
    Mat q_down, q_up;
    Mat k_down, k_up;
    Mat v_down, v_up;
};

struct LoraTower {
    std::vector<LoraLayer> layers;
};

struct LoraParams {
    LoraTower visual;
    LoraTower text;
    int rank = 8;
    float alpha = 1.0f;

    bool is_zero() const;
};

// One D-vector per clip slot of each merge step (group size g => g rows).
// Zero-initialized; added to clip tokens right before cross-clip matching.
struct ClipPositionalEmbeddings {
    std::vector<Mat> steps;
};

EncoderWeights init_encoder_weights(const ModelConfig& cfg, uint64_t seed);
LoraParams init_lora(const ModelConfig& cfg, uint64_t seed);
ClipPositionalEmbeddings init_cpe(const ModelConfig& cfg, const MergeSchedule& sched);

// Folds alpha * down * up into the frozen Q/K/V projections and clears the
// passed LoRA (both factors zeroed), so merging a second time is a no-op.
EncoderWeights lora_merge(const EncoderWeights& weights, LoraParams& lora);

// Multi-head self-attention over all tokens of ts; input is expected to be
// pre-normed by the caller, output is the projected attention result (the
// caller adds the residual). key_log_size_bias adds log(size) to every key's
// logits when cfg.proportional_attention is set.
TokenSet attention(const TokenSet& ts, const ModelConfig& cfg, const LayerWeights& lw,
                   const LoraLayer* lora, float lora_alpha);

// Mat-level core shared by the video and text towers.
Mat mhsa(const Mat& x, const ModelConfig& cfg, const LayerWeights& lw, const LoraLayer* lora,
         float lora_alpha, const std::vector<int>* key_sizes, bool causal);

// Per-frame block: attention, merge img_r tokens, FFN.
TokenSet imgme_block(const TokenSet& frame, const ModelConfig& cfg, const LayerWeights& lw,
                     const LoraLayer* lora, int img_r);

// Clip block: add clip positional embeddings (cpe may be null => zeros),
// concatenate, cross-merge to keep_cross unless skip_cross, attend,
// intra-merge to keep_intra (skipped when intra_merge is false), FFN.
// The output is a single clip with id new_clip_id; attn_tokens_out (when
// non-null) receives the observed token count entering attention.
TokenSet clipme_block(const std::vector<TokenSet>& clips, const ModelConfig& cfg,
                      const LayerWeights& lw, const LoraLayer* lora, const Mat* cpe,
                      double keep_cross, double keep_intra, bool skip_cross, bool intra_merge,
                      int new_clip_id, int* attn_tokens_out = nullptr);

struct VideoTrace {
    std::vector<LayerCounts> layers;  // observed per-layer counts
    TokenSet final_tokens;            // state after the last layer (pre final LN)
};

// frames: F matrices of tokens_per_frame x width patch+CLS embeddings.
// Returns the joint-space video embedding. The image-merge stage may run
// frames on `threads` workers; outputs are identical for any thread count.
std::vector<float> encode_video(const std::vector<Mat>& frames, const EncoderWeights& weights,
                                const LoraParams* lora, const ClipPositionalEmbeddings* cpe,
                                const ModelConfig& cfg, const MergeSchedule& sched,
                                int threads = 1, VideoTrace* trace = nullptr);

// token_ids: length <= text_max_len, each in [0, vocab). The embedding is
// read at the last position (end of sequence) after the final layer norm.
std::vector<float> encode_text(const std::vector<int>& token_ids, const EncoderWeights& weights,
                               const LoraParams* lora, const ModelConfig& cfg);

}  // namespace tokmerge
