#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "tokmerge/numerics.hpp"

namespace tokmerge::ad {

// Reverse-mode tape over Mat values. Frozen weights enter as constants;
// trainable tensors enter as leaves, whose gradients are read back after
// backward(). Forward values are computed with the same kernels as the plain
// encoder, so a traced forward reproduces the plain forward bit for bit.
using VarId = int;

class Tape {
 public:
    VarId constant(Mat v);
    VarId leaf(Mat v);

    VarId add(VarId a, VarId b);
    VarId scale_by(VarId a, float s);
    VarId matmul(VarId a, VarId b);
    VarId add_row_broadcast(VarId a, const std::vector<float>& row);
    VarId layer_norm(VarId x, const std::vector<float>& gamma, const std::vector<float>& beta,
                     float eps = 1e-5f);
    VarId gelu(VarId x);
    // Multi-head softmax attention core. key_bias (if any) is added to every
    // key column's logits; causal masks j > i.
    VarId attention_core(VarId q, VarId k, VarId v, int heads, const std::vector<float>* key_bias,
                         bool causal);
    VarId concat_rows(const std::vector<VarId>& parts);
    // out.row(r) = sum of weight * x.row(src); the merge/pool primitive.
    VarId linear_rows(VarId x, std::vector<std::vector<std::pair<int, float>>> rows);
    // x plus cpe.row(slot) broadcast over all rows of x.
    VarId add_cpe_row(VarId x, VarId cpe, int slot);

    const Mat& value(VarId id) const { return nodes_[id].value; }
    Mat& grad(VarId id) { return nodes_[id].grad; }
    bool requires_grad(VarId id) const { return nodes_[id].requires_grad; }

    // Accumulates `g` into the node's gradient (typically a loss seed).
    void seed_grad(VarId id, const Mat& g);
    // Propagates every seeded gradient back to the leaves.
    void backward();

    size_t size() const { return nodes_.size(); }

 private:
    struct Node {
        Mat value;
        Mat grad;  // allocated only when requires_grad
        bool requires_grad = false;
        std::function<void(Tape&)> back;
    };

    VarId push(Mat value, bool requires_grad, std::function<void(Tape&)> back);
    VarId next_id() const { return static_cast<VarId>(nodes_.size()); }
    std::vector<Node> nodes_;
};

}  // namespace tokmerge::ad
