#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tokmerge/encoder.hpp"
#include "tokmerge/synthgen.hpp"

namespace tokmerge {

// s[i][j] = cosine similarity of text i and video j, plus the temperature
// used by the contrastive loss.
struct SimilarityMatrix {
    Mat s;  // B x B
    float tau = 0.05f;
};

SimilarityMatrix similarity_matrix(const std::vector<std::vector<float>>& text_embs,
                                   const std::vector<std::vector<float>>& video_embs, float tau);

struct ContrastiveLoss {
    double total = 0.0;
    double t2v = 0.0;
    double v2t = 0.0;
};

// Symmetric InfoNCE over the matched diagonal, both retrieval directions,
// averaged. Row-max-stabilized log-sum-exp in float64.
ContrastiveLoss contrastive_loss(const SimilarityMatrix& sim);

// Closed-form gradient of contrastive_loss w.r.t. every similarity entry:
//   dL/ds_ij = ((P_ij - I_ij) + (Q_ij - I_ij)) / (2 B tau)
// with P the row softmax and Q the column softmax of s/tau.
Mat loss_grad(const SimilarityMatrix& sim);

enum class Direction { t2v, v2t };

struct RetrievalMetrics {
    double r1 = 0.0, r5 = 0.0, r10 = 0.0;  // percent
    double rsum = 0.0;
    double mean_rank = 0.0;  // 1-based
    std::string to_json() const;
};

// Rank of the true match per query; on ties the earlier index wins (a tied
// competitor with smaller index outranks the match; the match beats tied
// competitors with larger index).
RetrievalMetrics retrieval_metrics(const SimilarityMatrix& sim, Direction dir);

enum class GradMode { analytic, finite_difference };

struct TrainableGrads {
    LoraParams lora;              // gradient, same shapes as the parameters
    ClipPositionalEmbeddings cpe; // gradient, same shapes
    double loss = 0.0;
};

// Gradient of the contrastive loss over `pairs` w.r.t. every LoRA and clip
// positional embedding scalar. analytic = reverse-mode through the traced
// pipeline (merge selections are constants: gradients flow through the
// weighted averaging, not the argmax matching). finite_difference = central
// differences of the plain forward path; refused outside micro shapes
// (width <= 32, layers <= 4, tokens_per_frame <= 20, batch <= 8).
TrainableGrads param_grad(const std::vector<SynthPair>& pairs, const EncoderWeights& weights,
                          const LoraParams& lora, const ClipPositionalEmbeddings& cpe,
                          const ModelConfig& cfg, const MergeSchedule& sched, GradMode mode);

struct TrainSettings {
    int steps = 200;
    float learning_rate = 0.05f;
    float momentum = 0.9f;
    uint64_t seed = 0;
    int log_every = 1;
};

struct TrainStepRecord {
    int step = 0;
    double loss = 0.0;
    double train_r1 = 0.0;  // percent, on the training batch
};

struct TrainResult {
    std::vector<TrainStepRecord> log;
    LoraParams lora;
    ClipPositionalEmbeddings cpe;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double final_train_r1 = 0.0;

    std::string log_jsonl() const;  // line-delimited JSON, one record per step
};

// Momentum SGD over LoRA + clip positional embeddings only (the backbone is
// frozen), full-batch over the dataset. Deterministic given the seed; throws
// DivergenceError if the loss stops being finite.
TrainResult train_toy(const SynthDataset& data, const ModelConfig& cfg, const MergeSchedule& sched,
                      const EncoderWeights& weights, const TrainSettings& settings);

}  // namespace tokmerge
