#pragma once

#include "tokmerge/retrieval.hpp"

namespace tokmerge {

// Internals behind param_grad / train_toy: one tape per batch, loss closed at
// the similarity matrix (loss_grad seeds the embedding gradients analytically).
struct BatchGradResult {
    TrainableGrads grads;
    double loss = 0.0;
    double train_r1 = 0.0;  // percent, text-to-video on the batch
};

BatchGradResult traced_batch_gradients(const std::vector<SynthPair>& pairs,
                                       const EncoderWeights& weights, const LoraParams& lora,
                                       const ClipPositionalEmbeddings& cpe, const ModelConfig& cfg,
                                       const MergeSchedule& sched);

// Contrastive batch loss through the plain (non-traced) forward path; the
// finite-difference oracle perturbs parameters against this.
double batch_loss_plain(const std::vector<SynthPair>& pairs, const EncoderWeights& weights,
                        const LoraParams* lora, const ClipPositionalEmbeddings* cpe,
                        const ModelConfig& cfg, const MergeSchedule& sched);

}  // namespace tokmerge
