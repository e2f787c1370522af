#include "tokmerge/config.hpp"

namespace tokmerge {

ModelConfig preset_config(const std::string& name) {
    ModelConfig c;
    if (name == "b32") {
        // ViT-B/32 shape: 7x7 patches + CLS.
        c.num_layers = 12; c.width = 768; c.heads = 12; c.ffn_dim = 3072;
        c.patch_grid = 7; c.tokens_per_frame = 50; c.frame_count = 12; c.patch_size = 32;
        c.embed_dim = 512; c.lora_rank = 8;
    } else if (name == "b16") {
        // ViT-B/16 shape: 14x14 patches + CLS.
        c.num_layers = 12; c.width = 768; c.heads = 12; c.ffn_dim = 3072;
        c.patch_grid = 14; c.tokens_per_frame = 197; c.frame_count = 12; c.patch_size = 16;
        c.embed_dim = 512; c.lora_rank = 8;
    } else if (name == "toy") {
        c.num_layers = 12; c.width = 64; c.heads = 4; c.ffn_dim = 256;
        c.patch_grid = 4; c.tokens_per_frame = 17; c.frame_count = 12; c.patch_size = 8;
        c.embed_dim = 32; c.text_max_len = 16; c.lora_rank = 4;
    } else if (name == "micro") {
        c.num_layers = 2; c.width = 16; c.heads = 2; c.ffn_dim = 64;
        c.patch_grid = 2; c.tokens_per_frame = 5; c.frame_count = 4; c.patch_size = 4;
        c.embed_dim = 8; c.text_vocab_size = 64; c.text_max_len = 8; c.lora_rank = 2;
    } else {
        throw ContractViolation("unknown preset: " + name);
    }
    c.validate();
    return c;
}

std::string preset_default_schedule(const std::string& name) {
    if (name == "b32") return "12@9:6@10:3@11:1 r=2 Rc=0.7 Ri=0.9";
    if (name == "b16") return "12@9:6@10:3@11:1 r=10 Rc=0.6 Ri=0.8";
    if (name == "toy") return "12@9:6@10:3@11:1 r=1 Rc=0.7 Ri=0.9";
    if (name == "micro") return "4@2:1 r=0 Rc=0.7 Ri=0.9";
    throw ContractViolation("unknown preset: " + name);
}

std::string preset_identity_schedule(const std::string& name) {
    if (name == "micro") return "4 r=0 Rc=1 Ri=1";
    preset_config(name);  // validates the name
    return "12 r=0 Rc=1 Ri=1";
}

}  // namespace tokmerge
