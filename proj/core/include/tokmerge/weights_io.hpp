#pragma once

#include <map>
#include <string>
#include <vector>

#include "tokmerge/encoder.hpp"

namespace tokmerge {

// On-disk container shared by weights, trainable-state and dataset files:
//
//   [u64 little-endian header byte length][JSON header][float32 blob]
//
// The header carries {"format", "version", "endianness", "meta", "tensors"}
// where tensors is an ordered list of {"name", "shape"}; the blob holds the
// tensors' row-major float32 data in exactly that order. The loader checks
// the declared total byte length against the file size.
struct TensorContainer {
    std::string format;
    std::string meta_json;              // module-specific JSON payload
    std::vector<std::string> order;     // tensor names, in blob order
    std::map<std::string, Mat> tensors;

    void add(const std::string& name, Mat m);
    const Mat& get(const std::string& name) const;
};

void save_container(const std::string& path, const TensorContainer& c);
TensorContainer load_container(const std::string& path, const std::string& expect_format);

// Full dual-encoder backbone.
void save_weights(const std::string& path, const ModelConfig& cfg, const EncoderWeights& w);
EncoderWeights load_weights(const std::string& path, ModelConfig* cfg_out = nullptr);

// Trainable state (LoRA factors + clip positional embeddings).
void save_trainable(const std::string& path, const ModelConfig& cfg, const LoraParams& lora,
                    const ClipPositionalEmbeddings& cpe);
void load_trainable(const std::string& path, LoraParams* lora, ClipPositionalEmbeddings* cpe);

// Stable byte serialization of the backbone, for frozen-weight checks.
std::string weights_digest(const EncoderWeights& w);

}  // namespace tokmerge
