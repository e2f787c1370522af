#pragma once

#include <cstdint>
#include <string>

#include "tokmerge/errors.hpp"

namespace tokmerge {

enum class VideoPool {
    cls_mean,    // mean of the surviving CLS tokens (default)
    token_mean,  // size-weighted mean over all final tokens
};

// Transformer shape shared by both encoder towers plus the merge-related
// behavioral flags. The text tower reuses width/heads/num_layers.
struct ModelConfig {
    int num_layers = 12;
    int width = 768;       // D
    int heads = 12;        // H; head_dim = D / H
    int ffn_dim = 3072;    // usually 4*D
    int patch_grid = 7;    // tokens_per_frame = grid^2 + 1 (CLS)
    int tokens_per_frame = 50;
    int frame_count = 12;  // F
    int patch_size = 32;   // pixels per patch side, for the patch-embedding cost
    int text_vocab_size = 256;
    int text_max_len = 32;
    int embed_dim = 512;   // joint space
    bool proportional_attention = true;  // += log(size) on key logits
    float temperature = 0.05f;           // contrastive tau
    int lora_rank = 8;
    float lora_alpha = 1.0f;
    bool size_weighted_merge = true;  // plain-average merge kept for ablation
    bool protect_cls = true;
    VideoPool pool = VideoPool::cls_mean;

    int head_dim() const { return width / heads; }
    void validate() const {
        require(width % heads == 0, "ModelConfig: width not divisible by heads");
        require(tokens_per_frame >= 2, "ModelConfig: tokens_per_frame < 2");
        require(temperature > 0.0f, "ModelConfig: temperature must be positive");
        require(num_layers >= 1 && frame_count >= 1, "ModelConfig: empty model");
    }
};

// Named presets: b32 (D=768, N=50), b16 (D=768, N=197), toy (D=64, N=17),
// micro (D=16, N=5, 2 layers). Throws ContractViolation on unknown names.
ModelConfig preset_config(const std::string& name);

// The preset's usual merge schedule / no-merge schedule, as schedule strings.
std::string preset_default_schedule(const std::string& name);
std::string preset_identity_schedule(const std::string& name);

}  // namespace tokmerge
