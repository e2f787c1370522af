#include "tokmerge/autodiff.hpp"

#include <cmath>
#include <memory>

#include "tokmerge/tokens.hpp"

namespace tokmerge::ad {

VarId Tape::push(Mat value, bool requires_grad, std::function<void(Tape&)> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.grad = Mat(n.value.rows, n.value.cols);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<VarId>(nodes_.size() - 1);
}

VarId Tape::constant(Mat v) { return push(std::move(v), false, nullptr); }

VarId Tape::leaf(Mat v) { return push(std::move(v), true, nullptr); }

void Tape::seed_grad(VarId id, const Mat& g) {
    require(nodes_[id].requires_grad, "seed_grad: node does not track gradients");
    add_inplace(nodes_[id].grad, g);
}

void Tape::backward() {
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
        if (nodes_[id].requires_grad && nodes_[id].back) nodes_[id].back(*this);
    }
}

VarId Tape::add(VarId a, VarId b) {
    Mat v = tokmerge::add(value(a), value(b));
    const bool rg = requires_grad(a) || requires_grad(b);
    if (!rg) return constant(std::move(v));
    const VarId out = next_id();
    push(std::move(v), true, [a, b, out](Tape& t) mutable {
        const Mat& g = t.grad(out);
        if (t.requires_grad(a)) add_inplace(t.grad(a), g);
        if (t.requires_grad(b)) add_inplace(t.grad(b), g);
    });
    return out;
}

VarId Tape::scale_by(VarId a, float s) {
    Mat v = tokmerge::scale(value(a), s);
    if (!requires_grad(a)) return constant(std::move(v));
    const VarId out = next_id();
    push(std::move(v), true, [a, s, out](Tape& t) mutable {
        add_inplace(t.grad(a), tokmerge::scale(t.grad(out), s));
    });
    return out;
}

VarId Tape::matmul(VarId a, VarId b) {
    Mat v = tokmerge::matmul(value(a), value(b));
    const bool rg = requires_grad(a) || requires_grad(b);
    if (!rg) return constant(std::move(v));
    const VarId out = next_id();
    push(std::move(v), true, [a, b, out](Tape& t) mutable {
        const Mat& g = t.grad(out);
        if (t.requires_grad(a)) add_inplace(t.grad(a), tokmerge::matmul(g, transpose(t.value(b))));
        if (t.requires_grad(b)) add_inplace(t.grad(b), tokmerge::matmul(transpose(t.value(a)), g));
    });
    return out;
}

VarId Tape::add_row_broadcast(VarId a, const std::vector<float>& row) {
    Mat v = value(a);
    add_row_broadcast_inplace(v, row.data());
    if (!requires_grad(a)) return constant(std::move(v));
    const VarId out = next_id();
    push(std::move(v), true, [a, out](Tape& t) mutable {
        add_inplace(t.grad(a), t.grad(out));  // constant bias: pass-through
    });
    return out;
}

VarId Tape::layer_norm(VarId x, const std::vector<float>& gamma, const std::vector<float>& beta,
                       float eps) {
    const Mat& in = value(x);
    Mat v = tokmerge::layer_norm(in, gamma, beta, eps);
    if (!requires_grad(x)) return constant(std::move(v));

    // Save per-row mean and inverse stddev for the backward pass.
    const int rows = in.rows, cols = in.cols;
    auto saved = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * 2);
    for (int i = 0; i < rows; ++i) {
        const float* src = in.row(i);
        double mean = 0.0;
        for (int j = 0; j < cols; ++j) mean += src[j];
        mean /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double d = src[j] - mean;
            var += d * d;
        }
        var /= cols;
        (*saved)[2 * i] = mean;
        (*saved)[2 * i + 1] = 1.0 / std::sqrt(var + static_cast<double>(eps));
    }
    auto gamma_copy = std::make_shared<std::vector<float>>(gamma);
    const VarId out = next_id();
    push(std::move(v), true, [x, out, saved, gamma_copy](Tape& t) mutable {
        const Mat& g = t.grad(out);
        const Mat& in2 = t.value(x);
        Mat& gx = t.grad(x);
        const int r = in2.rows, c = in2.cols;
        for (int i = 0; i < r; ++i) {
            const double mean = (*saved)[2 * i];
            const double inv = (*saved)[2 * i + 1];
            const float* src = in2.row(i);
            const float* go = g.row(i);
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int j = 0; j < c; ++j) {
                const double xhat = (src[j] - mean) * inv;
                const double dxhat = static_cast<double>(go[j]) * (*gamma_copy)[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            float* gi = gx.row(i);
            for (int j = 0; j < c; ++j) {
                const double xhat = (src[j] - mean) * inv;
                const double dxhat = static_cast<double>(go[j]) * (*gamma_copy)[j];
                gi[j] += static_cast<float>(inv * (dxhat - sum_dxhat / c - xhat * sum_dxhat_xhat / c));
            }
        }
    });
    return out;
}

VarId Tape::gelu(VarId x) {
    Mat v = tokmerge::gelu(value(x));
    if (!requires_grad(x)) return constant(std::move(v));
    const VarId out = next_id();
    push(std::move(v), true, [x, out](Tape& t) mutable {
        const Mat& g = t.grad(out);
        const Mat& in = t.value(x);
        Mat& gx = t.grad(x);
        const float c = 0.7978845608028654f;  // sqrt(2/pi)
        const float a = 0.044715f;
        for (size_t i = 0; i < in.data.size(); ++i) {
            const float xv = in.data[i];
            const float u = c * (xv + a * xv * xv * xv);
            const float th = std::tanh(u);
            const float du = c * (1.0f + 3.0f * a * xv * xv);
            const float deriv = 0.5f * (1.0f + th) + 0.5f * xv * (1.0f - th * th) * du;
            gx.data[i] += g.data[i] * deriv;
        }
    });
    return out;
}

VarId Tape::attention_core(VarId q, VarId k, VarId v, int heads, const std::vector<float>* key_bias,
                           bool causal) {
    const Mat& qv = value(q);
    const Mat& kv = value(k);
    const Mat& vv = value(v);
    require(qv.cols % heads == 0, "attention_core: width not divisible by heads");
    const int t = qv.rows;
    const int dh = qv.cols / heads;
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));

    auto attn_saved = std::make_shared<std::vector<Mat>>();
    attn_saved->reserve(heads);
    Mat concat(t, qv.cols);
    for (int head = 0; head < heads; ++head) {
        const Mat qh = slice_cols(qv, head * dh, (head + 1) * dh);
        const Mat kh = slice_cols(kv, head * dh, (head + 1) * dh);
        const Mat vh = slice_cols(vv, head * dh, (head + 1) * dh);
        Mat scores = tokmerge::matmul(qh, transpose(kh));
        for (int i = 0; i < t; ++i) {
            float* row = scores.row(i);
            for (int j = 0; j < t; ++j) {
                row[j] *= inv_sqrt;
                if (key_bias != nullptr) row[j] += (*key_bias)[j];
                if (causal && j > i) row[j] = -1e30f;
            }
        }
        Mat attn = softmax_rows(scores);
        paste_cols(concat, tokmerge::matmul(attn, vh), head * dh);
        attn_saved->push_back(std::move(attn));
    }

    const bool rg = requires_grad(q) || requires_grad(k) || requires_grad(v);
    if (!rg) return constant(std::move(concat));
    const VarId out = next_id();
    push(std::move(concat), true, [q, k, v, heads, dh, inv_sqrt, attn_saved, out](Tape& t_) mutable {
        const Mat& g = t_.grad(out);
        const Mat& qv2 = t_.value(q);
        const Mat& kv2 = t_.value(k);
        const Mat& vv2 = t_.value(v);
        const int n = qv2.rows;
        for (int head = 0; head < heads; ++head) {
            const Mat gh = slice_cols(g, head * dh, (head + 1) * dh);
            const Mat qh = slice_cols(qv2, head * dh, (head + 1) * dh);
            const Mat kh = slice_cols(kv2, head * dh, (head + 1) * dh);
            const Mat vh = slice_cols(vv2, head * dh, (head + 1) * dh);
            const Mat& attn = (*attn_saved)[head];

            const Mat d_attn = tokmerge::matmul(gh, transpose(vh));  // n x n
            // Softmax backward: ds = A (.) (dA - rowsum(dA (.) A)).
            Mat d_scores(n, n);
            for (int i = 0; i < n; ++i) {
                double dot = 0.0;
                const float* arow = attn.row(i);
                const float* darow = d_attn.row(i);
                for (int j = 0; j < n; ++j) dot += static_cast<double>(arow[j]) * darow[j];
                float* ds = d_scores.row(i);
                for (int j = 0; j < n; ++j) {
                    ds[j] = arow[j] * (darow[j] - static_cast<float>(dot));
                }
            }
            // Masked/biased entries: d(bias)=0 (constant), masked positions
            // have attn=0 so d_scores is already 0 there.
            if (t_.requires_grad(q)) {
                Mat dq = tokmerge::matmul(d_scores, kh);
                for (float& x : dq.data) x *= inv_sqrt;
                Mat& gq = t_.grad(q);
                for (int i = 0; i < n; ++i) {
                    float* dst = gq.row(i) + head * dh;
                    const float* src = dq.row(i);
                    for (int j = 0; j < dh; ++j) dst[j] += src[j];
                }
            }
            if (t_.requires_grad(k)) {
                Mat dk = tokmerge::matmul(transpose(d_scores), qh);
                for (float& x : dk.data) x *= inv_sqrt;
                Mat& gk = t_.grad(k);
                for (int i = 0; i < n; ++i) {
                    float* dst = gk.row(i) + head * dh;
                    const float* src = dk.row(i);
                    for (int j = 0; j < dh; ++j) dst[j] += src[j];
                }
            }
            if (t_.requires_grad(v)) {
                const Mat dv = tokmerge::matmul(transpose(attn), gh);
                Mat& gv = t_.grad(v);
                for (int i = 0; i < n; ++i) {
                    float* dst = gv.row(i) + head * dh;
                    const float* src = dv.row(i);
                    for (int j = 0; j < dh; ++j) dst[j] += src[j];
                }
            }
        }
    });
    return out;
}

VarId Tape::concat_rows(const std::vector<VarId>& parts) {
    require(!parts.empty(), "concat_rows: empty");
    const int cols = value(parts[0]).cols;
    int rows = 0;
    bool rg = false;
    for (VarId p : parts) {
        require(value(p).cols == cols, "concat_rows: width mismatch");
        rows += value(p).rows;
        rg = rg || requires_grad(p);
    }
    Mat v(rows, cols);
    int at = 0;
    for (VarId p : parts) {
        const Mat& pv = value(p);
        std::copy(pv.data.begin(), pv.data.end(), v.row(at));
        at += pv.rows;
    }
    if (!rg) return constant(std::move(v));
    auto parts_copy = std::make_shared<std::vector<VarId>>(parts);
    const VarId out = next_id();
    push(std::move(v), true, [parts_copy, out](Tape& t) mutable {
        const Mat& g = t.grad(out);
        int at2 = 0;
        for (VarId p : *parts_copy) {
            const int pr = t.value(p).rows;
            if (t.requires_grad(p)) {
                Mat& gp = t.grad(p);
                for (int i = 0; i < pr; ++i) {
                    const float* src = g.row(at2 + i);
                    float* dst = gp.row(i);
                    for (int j = 0; j < g.cols; ++j) dst[j] += src[j];
                }
            }
            at2 += pr;
        }
    });
    return out;
}

VarId Tape::linear_rows(VarId x, std::vector<std::vector<std::pair<int, float>>> rows) {
    Mat v = apply_rows_spec(value(x), rows);
    if (!requires_grad(x)) return constant(std::move(v));
    auto spec = std::make_shared<std::vector<std::vector<std::pair<int, float>>>>(std::move(rows));
    const VarId out = next_id();
    push(std::move(v), true, [x, spec, out](Tape& t) mutable {
        const Mat& g = t.grad(out);
        Mat& gx = t.grad(x);
        for (size_t r = 0; r < spec->size(); ++r) {
            const float* grow = g.row(static_cast<int>(r));
            for (const auto& [src, w] : (*spec)[r]) {
                float* dst = gx.row(src);
                for (int j = 0; j < g.cols; ++j) dst[j] += w * grow[j];
            }
        }
    });
    return out;
}

VarId Tape::add_cpe_row(VarId x, VarId cpe, int slot) {
    Mat v = value(x);
    add_row_broadcast_inplace(v, value(cpe).row(slot));
    const bool rg = requires_grad(x) || requires_grad(cpe);
    if (!rg) return constant(std::move(v));
    const VarId out = next_id();
    push(std::move(v), true, [x, cpe, slot, out](Tape& t) mutable {
        const Mat& g = t.grad(out);
        if (t.requires_grad(x)) add_inplace(t.grad(x), g);
        if (t.requires_grad(cpe)) {
            float* dst = t.grad(cpe).row(slot);
            for (int i = 0; i < g.rows; ++i) {
                const float* src = g.row(i);
                for (int j = 0; j < g.cols; ++j) dst[j] += src[j];
            }
        }
    });
    return out;
}

}  // namespace tokmerge::ad
