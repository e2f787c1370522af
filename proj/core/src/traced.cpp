#include "tokmerge/traced.hpp"

#include <cmath>

#include "tokmerge/autodiff.hpp"

namespace tokmerge {

namespace {

using ad::Tape;
using ad::VarId;

struct LoraLeaves {
    VarId q_down, q_up, k_down, k_up, v_down, v_up;
};

struct TowerConstants {
    std::vector<VarId> wq, wk, wv, wo;
    VarId proj;
};

struct ModelTrace {
    TowerConstants visual, text;
    std::vector<LoraLeaves> visual_lora, text_lora;
    std::vector<VarId> cpe;
    float alpha = 1.0f;
};

TowerConstants register_tower(Tape& t, const std::vector<LayerWeights>& layers, const Mat& proj) {
    TowerConstants tc;
    for (const LayerWeights& lw : layers) {
        tc.wq.push_back(t.constant(lw.wq));
        tc.wk.push_back(t.constant(lw.wk));
        tc.wv.push_back(t.constant(lw.wv));
        tc.wo.push_back(t.constant(lw.wo));
    }
    tc.proj = t.constant(proj);
    return tc;
}

std::vector<LoraLeaves> register_lora(Tape& t, const LoraTower& tower) {
    std::vector<LoraLeaves> out;
    out.reserve(tower.layers.size());
    for (const LoraLayer& l : tower.layers) {
        out.push_back({t.leaf(l.q_down), t.leaf(l.q_up), t.leaf(l.k_down), t.leaf(l.k_up),
                       t.leaf(l.v_down), t.leaf(l.v_up)});
    }
    return out;
}

VarId traced_projected(Tape& t, VarId x, VarId w, const std::vector<float>& b, VarId down, VarId up,
                       float alpha) {
    VarId out = t.add_row_broadcast(t.matmul(x, w), b);
    VarId delta = t.matmul(t.matmul(x, down), up);
    if (alpha != 1.0f) delta = t.scale_by(delta, alpha);
    return t.add(out, delta);
}

VarId traced_mhsa(Tape& t, VarId x, const ModelConfig& cfg, const LayerWeights& lw,
                  const TowerConstants& tc, int layer, const LoraLeaves& ll, float alpha,
                  const std::vector<int>* key_sizes, bool causal) {
    VarId q = traced_projected(t, x, tc.wq[layer], lw.bq, ll.q_down, ll.q_up, alpha);
    VarId k = traced_projected(t, x, tc.wk[layer], lw.bk, ll.k_down, ll.k_up, alpha);
    VarId v = traced_projected(t, x, tc.wv[layer], lw.bv, ll.v_down, ll.v_up, alpha);
    std::vector<float> bias;
    if (key_sizes != nullptr) {
        bias.resize(key_sizes->size());
        for (size_t j = 0; j < key_sizes->size(); ++j) {
            bias[j] = std::log(static_cast<float>((*key_sizes)[j]));
        }
    }
    VarId core = t.attention_core(q, k, v, cfg.heads, key_sizes != nullptr ? &bias : nullptr, causal);
    return t.add_row_broadcast(t.matmul(core, tc.wo[layer]), lw.bo);
}

VarId traced_ffn(Tape& t, VarId x, const LayerWeights& lw, VarId w1, VarId w2) {
    VarId h = t.gelu(t.add_row_broadcast(t.matmul(x, w1), lw.b_fc1));
    return t.add_row_broadcast(t.matmul(h, w2), lw.b_fc2);
}

// Token metadata runs beside the tape; features live on it.
struct TracedTokens {
    VarId feat;
    std::vector<int> sizes;
    std::vector<int> clip_ids;
    std::vector<uint8_t> is_cls;
};

TokenSet snapshot(const Tape& t, const TracedTokens& ts) {
    TokenSet s;
    s.features = t.value(ts.feat);
    s.sizes = ts.sizes;
    s.clip_ids = ts.clip_ids;
    s.is_cls = ts.is_cls;
    s.origins.resize(ts.sizes.size());
    return s;
}

void apply_spec_metadata(TracedTokens& ts, const MergeRowsSpec& spec) {
    ts.sizes = spec.sizes;
    ts.clip_ids = spec.clip_ids;
    ts.is_cls = spec.is_cls;
}

struct TracedLayerRefs {
    const LayerWeights& lw;
    const TowerConstants& tc;
    int layer;
    VarId w_fc1, w_fc2;
};

TracedTokens traced_imgme(Tape& t, TracedTokens ts, const ModelConfig& cfg, const TracedLayerRefs& lr,
                          const LoraLeaves& ll, float alpha, int img_r) {
    VarId normed = t.layer_norm(ts.feat, lr.lw.ln1_gamma, lr.lw.ln1_beta);
    ts.feat = t.add(ts.feat, traced_mhsa(t, normed, cfg, lr.lw, lr.tc, lr.layer, ll, alpha,
                                         cfg.proportional_attention ? &ts.sizes : nullptr, false));
    if (img_r > 0) {
        const TokenSet snap = snapshot(t, ts);
        const MergePlan plan = bipartite_soft_match(snap, img_r, cfg.protect_cls);
        const MergeRowsSpec spec = merge_rows_spec(snap, plan, cfg.size_weighted_merge);
        ts.feat = t.linear_rows(ts.feat, spec.rows);
        apply_spec_metadata(ts, spec);
    }
    VarId normed2 = t.layer_norm(ts.feat, lr.lw.ln2_gamma, lr.lw.ln2_beta);
    ts.feat = t.add(ts.feat, traced_ffn(t, normed2, lr.lw, lr.w_fc1, lr.w_fc2));
    return ts;
}

TracedTokens traced_clipme(Tape& t, std::vector<TracedTokens> clips, const ModelConfig& cfg,
                           const TracedLayerRefs& lr, const LoraLeaves& ll, float alpha, VarId cpe_leaf,
                           double keep_cross, double keep_intra, bool skip_cross, bool intra_merge,
                           int new_clip_id) {
    if (cpe_leaf >= 0) {
        for (size_t s = 0; s < clips.size(); ++s) {
            clips[s].feat = t.add_cpe_row(clips[s].feat, cpe_leaf, static_cast<int>(s));
        }
    }
    TracedTokens ts;
    std::vector<VarId> feats;
    for (const TracedTokens& c : clips) {
        feats.push_back(c.feat);
        ts.sizes.insert(ts.sizes.end(), c.sizes.begin(), c.sizes.end());
        ts.clip_ids.insert(ts.clip_ids.end(), c.clip_ids.begin(), c.clip_ids.end());
        ts.is_cls.insert(ts.is_cls.end(), c.is_cls.begin(), c.is_cls.end());
    }
    ts.feat = t.concat_rows(feats);

    if (!skip_cross && clips.size() > 1) {
        const int kept = kept_token_count(static_cast<int>(ts.sizes.size()), keep_cross);
        const TokenSet snap = snapshot(t, ts);
        const MergePlan plan =
            bipartite_soft_match(snap, static_cast<int>(ts.sizes.size()) - kept, cfg.protect_cls);
        const MergeRowsSpec spec = merge_rows_spec(snap, plan, cfg.size_weighted_merge);
        ts.feat = t.linear_rows(ts.feat, spec.rows);
        apply_spec_metadata(ts, spec);
    }
    for (int& id : ts.clip_ids) id = new_clip_id;

    VarId normed = t.layer_norm(ts.feat, lr.lw.ln1_gamma, lr.lw.ln1_beta);
    ts.feat = t.add(ts.feat, traced_mhsa(t, normed, cfg, lr.lw, lr.tc, lr.layer, ll, alpha,
                                         cfg.proportional_attention ? &ts.sizes : nullptr, false));

    if (intra_merge && keep_intra < 1.0) {
        const int kept = kept_token_count(static_cast<int>(ts.sizes.size()), keep_intra);
        const TokenSet snap = snapshot(t, ts);
        const MergePlan plan =
            bipartite_soft_match(snap, static_cast<int>(ts.sizes.size()) - kept, cfg.protect_cls);
        const MergeRowsSpec spec = merge_rows_spec(snap, plan, cfg.size_weighted_merge);
        ts.feat = t.linear_rows(ts.feat, spec.rows);
        apply_spec_metadata(ts, spec);
    }
    VarId normed2 = t.layer_norm(ts.feat, lr.lw.ln2_gamma, lr.lw.ln2_beta);
    ts.feat = t.add(ts.feat, traced_ffn(t, normed2, lr.lw, lr.w_fc1, lr.w_fc2));
    return ts;
}

struct TowerFfnConstants {
    std::vector<VarId> w1, w2;
};

TowerFfnConstants register_ffn(Tape& t, const std::vector<LayerWeights>& layers) {
    TowerFfnConstants fc;
    for (const LayerWeights& lw : layers) {
        fc.w1.push_back(t.constant(lw.w_fc1));
        fc.w2.push_back(t.constant(lw.w_fc2));
    }
    return fc;
}

VarId traced_encode_video(Tape& t, const std::vector<Mat>& frames, const EncoderWeights& weights,
                          const ModelTrace& mt, const TowerFfnConstants& ffn, const ModelConfig& cfg,
                          const MergeSchedule& sched) {
    const int image_layers = std::min(sched.start_clip, cfg.num_layers + 1) - 1;

    std::vector<TracedTokens> clips;
    for (size_t f = 0; f < frames.size(); ++f) {
        TracedTokens ts;
        ts.feat = t.constant(frames[f]);
        const int n = frames[f].rows;
        ts.sizes.assign(n, 1);
        ts.clip_ids.assign(n, static_cast<int>(f));
        ts.is_cls.assign(n, 0);
        ts.is_cls[0] = 1;
        for (int layer = 1; layer <= image_layers; ++layer) {
            const TracedLayerRefs lr{weights.visual.layers[layer - 1], mt.visual, layer - 1,
                                     ffn.w1[layer - 1], ffn.w2[layer - 1]};
            ts = traced_imgme(t, std::move(ts), cfg, lr, mt.visual_lora[layer - 1], mt.alpha, sched.img_r);
        }
        clips.push_back(std::move(ts));
    }

    size_t next_step = 0;
    for (int layer = image_layers + 1; layer <= cfg.num_layers; ++layer) {
        const TracedLayerRefs lr{weights.visual.layers[layer - 1], mt.visual, layer - 1,
                                 ffn.w1[layer - 1], ffn.w2[layer - 1]};
        const LoraLeaves& ll = mt.visual_lora[layer - 1];
        const bool is_step = next_step < sched.steps.size() && sched.steps[next_step].layer == layer;
        if (is_step) {
            const int group = sched.group_size(next_step);
            const int new_count = sched.steps[next_step].clip_count;
            const VarId cpe_leaf = mt.cpe.empty() ? -1 : mt.cpe[next_step];
            std::vector<TracedTokens> merged;
            merged.reserve(new_count);
            for (int g = 0; g < new_count; ++g) {
                std::vector<TracedTokens> group_clips(clips.begin() + static_cast<long>(g) * group,
                                                      clips.begin() + static_cast<long>(g + 1) * group);
                merged.push_back(traced_clipme(t, std::move(group_clips), cfg, lr, ll, mt.alpha, cpe_leaf,
                                               sched.keep_cross, sched.keep_intra, false, true, g));
            }
            clips = std::move(merged);
            ++next_step;
        } else {
            const bool in_gap = next_step < sched.steps.size();
            const bool intra_on = in_gap ? sched.gap_intra : sched.tail_intra;
            for (size_t c = 0; c < clips.size(); ++c) {
                const int id = clips[c].clip_ids.empty() ? static_cast<int>(c) : clips[c].clip_ids[0];
                clips[c] = traced_clipme(t, {clips[c]}, cfg, lr, ll, mt.alpha, -1, sched.keep_cross,
                                         sched.keep_intra, true, intra_on, id);
            }
        }
    }

    TracedTokens final_ts;
    {
        std::vector<VarId> feats;
        for (const TracedTokens& c : clips) {
            feats.push_back(c.feat);
            final_ts.sizes.insert(final_ts.sizes.end(), c.sizes.begin(), c.sizes.end());
            final_ts.is_cls.insert(final_ts.is_cls.end(), c.is_cls.begin(), c.is_cls.end());
        }
        final_ts.feat = clips.size() == 1 ? clips[0].feat : t.concat_rows(feats);
    }
    VarId normed = t.layer_norm(final_ts.feat, weights.visual.ln_final_gamma, weights.visual.ln_final_beta);

    std::vector<std::pair<int, float>> pool_terms;
    const int count = static_cast<int>(final_ts.sizes.size());
    if (cfg.pool == VideoPool::cls_mean) {
        int cls = 0;
        for (int i = 0; i < count; ++i) cls += final_ts.is_cls[i] != 0;
        require(cls > 0, "traced_encode_video: no CLS token to pool");
        const float w = 1.0f / static_cast<float>(cls);
        for (int i = 0; i < count; ++i) {
            if (final_ts.is_cls[i]) pool_terms.push_back({i, w});
        }
    } else {
        double total = 0.0;
        for (int s : final_ts.sizes) total += s;
        for (int i = 0; i < count; ++i) {
            pool_terms.push_back({i, static_cast<float>(final_ts.sizes[i] / total)});
        }
    }
    VarId pooled = t.linear_rows(normed, {pool_terms});
    return t.matmul(pooled, mt.visual.proj);
}

VarId traced_encode_text(Tape& t, const std::vector<int>& token_ids, const EncoderWeights& weights,
                         const ModelTrace& mt, const TowerFfnConstants& ffn, const ModelConfig& cfg) {
    const int n = static_cast<int>(token_ids.size());
    Mat x0(n, cfg.width);
    for (int i = 0; i < n; ++i) {
        const int id = token_ids[i];
        require(id >= 0 && id < cfg.text_vocab_size, "traced_encode_text: unknown token id");
        const float* emb = weights.text.token_embedding.row(id);
        const float* pos = weights.text.pos_embedding.row(i);
        float* dst = x0.row(i);
        for (int j = 0; j < cfg.width; ++j) dst[j] = emb[j] + pos[j];
    }
    VarId x = t.constant(std::move(x0));
    for (size_t layer = 0; layer < weights.text.layers.size(); ++layer) {
        const LayerWeights& lw = weights.text.layers[layer];
        VarId normed = t.layer_norm(x, lw.ln1_gamma, lw.ln1_beta);
        x = t.add(x, traced_mhsa(t, normed, cfg, lw, mt.text, static_cast<int>(layer),
                                 mt.text_lora[layer], mt.alpha, nullptr, /*causal=*/true));
        VarId normed2 = t.layer_norm(x, lw.ln2_gamma, lw.ln2_beta);
        x = t.add(x, traced_ffn(t, normed2, lw, ffn.w1[layer], ffn.w2[layer]));
    }
    VarId normed = t.layer_norm(x, weights.text.ln_final_gamma, weights.text.ln_final_beta);
    VarId last = t.linear_rows(normed, {{{n - 1, 1.0f}}});
    return t.matmul(last, mt.text.proj);
}

}  // namespace

BatchGradResult traced_batch_gradients(const std::vector<SynthPair>& pairs,
                                       const EncoderWeights& weights, const LoraParams& lora,
                                       const ClipPositionalEmbeddings& cpe, const ModelConfig& cfg,
                                       const MergeSchedule& sched) {
    require(pairs.size() >= 2, "traced_batch_gradients: need at least 2 pairs");
    cfg.validate();
    sched.validate_against(cfg);
    require(static_cast<int>(lora.visual.layers.size()) == cfg.num_layers &&
                static_cast<int>(lora.text.layers.size()) == cfg.num_layers,
            "traced_batch_gradients: lora layer count mismatch");
    require(cpe.steps.size() == sched.steps.size(), "traced_batch_gradients: cpe step count mismatch");

    Tape tape;
    ModelTrace mt;
    mt.alpha = cfg.lora_alpha;
    mt.visual = register_tower(tape, weights.visual.layers, weights.visual.proj);
    mt.text = register_tower(tape, weights.text.layers, weights.text.proj);
    mt.visual_lora = register_lora(tape, lora.visual);
    mt.text_lora = register_lora(tape, lora.text);
    for (const Mat& step : cpe.steps) mt.cpe.push_back(tape.leaf(step));
    const TowerFfnConstants vffn = register_ffn(tape, weights.visual.layers);
    const TowerFfnConstants tffn = register_ffn(tape, weights.text.layers);

    const int b = static_cast<int>(pairs.size());
    std::vector<VarId> text_vars(b), video_vars(b);
    std::vector<std::vector<float>> text_embs(b), video_embs(b);
    for (int i = 0; i < b; ++i) {
        video_vars[i] = traced_encode_video(tape, pairs[i].frames, weights, mt, vffn, cfg, sched);
        text_vars[i] = traced_encode_text(tape, pairs[i].text_ids, weights, mt, tffn, cfg);
        video_embs[i] = tape.value(video_vars[i]).data;
        text_embs[i] = tape.value(text_vars[i]).data;
        for (const std::vector<float>* emb : {&video_embs[i], &text_embs[i]}) {
            for (float v : *emb) {
                if (!std::isfinite(v)) throw DivergenceError("non-finite embedding in batch forward");
            }
        }
    }

    const SimilarityMatrix sim = similarity_matrix(text_embs, video_embs, cfg.temperature);
    const ContrastiveLoss loss = contrastive_loss(sim);
    const Mat g = loss_grad(sim);

    // Seed d(loss)/d(raw embedding): s_ij = cos(t_i, v_j),
    // ds/dt = (v_hat - s * t_hat) / |t|, ds/dv symmetric.
    const int e = cfg.embed_dim;
    std::vector<double> tnorm(b), vnorm(b);
    for (int i = 0; i < b; ++i) {
        tnorm[i] = l2_norm(text_embs[i].data(), e);
        vnorm[i] = l2_norm(video_embs[i].data(), e);
        require(tnorm[i] > 0.0 && vnorm[i] > 0.0, "traced_batch_gradients: zero-norm embedding");
    }
    for (int i = 0; i < b; ++i) {
        Mat seed(1, e);
        std::vector<double> acc(e, 0.0);
        for (int j = 0; j < b; ++j) {
            const double gij = g.at(i, j);
            const double s = sim.s.at(i, j);
            for (int c = 0; c < e; ++c) {
                const double vhat = video_embs[j][c] / vnorm[j];
                const double that = text_embs[i][c] / tnorm[i];
                acc[c] += gij * (vhat - s * that) / tnorm[i];
            }
        }
        for (int c = 0; c < e; ++c) seed.at(0, c) = static_cast<float>(acc[c]);
        tape.seed_grad(text_vars[i], seed);
    }
    for (int j = 0; j < b; ++j) {
        Mat seed(1, e);
        std::vector<double> acc(e, 0.0);
        for (int i = 0; i < b; ++i) {
            const double gij = g.at(i, j);
            const double s = sim.s.at(i, j);
            for (int c = 0; c < e; ++c) {
                const double vhat = video_embs[j][c] / vnorm[j];
                const double that = text_embs[i][c] / tnorm[i];
                acc[c] += gij * (that - s * vhat) / vnorm[j];
            }
        }
        for (int c = 0; c < e; ++c) seed.at(0, c) = static_cast<float>(acc[c]);
        tape.seed_grad(video_vars[j], seed);
    }

    tape.backward();

    BatchGradResult res;
    res.loss = loss.total;
    res.train_r1 = retrieval_metrics(sim, Direction::t2v).r1;
    res.grads.loss = loss.total;
    res.grads.lora.rank = lora.rank;
    res.grads.lora.alpha = lora.alpha;
    auto read_tower = [&](const std::vector<LoraLeaves>& leaves, LoraTower& out) {
        out.layers.resize(leaves.size());
        for (size_t l = 0; l < leaves.size(); ++l) {
            out.layers[l].q_down = tape.grad(leaves[l].q_down);
            out.layers[l].q_up = tape.grad(leaves[l].q_up);
            out.layers[l].k_down = tape.grad(leaves[l].k_down);
            out.layers[l].k_up = tape.grad(leaves[l].k_up);
            out.layers[l].v_down = tape.grad(leaves[l].v_down);
            out.layers[l].v_up = tape.grad(leaves[l].v_up);
        }
    };
    read_tower(mt.visual_lora, res.grads.lora.visual);
    read_tower(mt.text_lora, res.grads.lora.text);
    for (VarId id : mt.cpe) res.grads.cpe.steps.push_back(tape.grad(id));
    return res;
}

double batch_loss_plain(const std::vector<SynthPair>& pairs, const EncoderWeights& weights,
                        const LoraParams* lora, const ClipPositionalEmbeddings* cpe,
                        const ModelConfig& cfg, const MergeSchedule& sched) {
    require(pairs.size() >= 2, "batch_loss_plain: need at least 2 pairs");
    std::vector<std::vector<float>> text_embs, video_embs;
    for (const SynthPair& p : pairs) {
        video_embs.push_back(encode_video(p.frames, weights, lora, cpe, cfg, sched));
        text_embs.push_back(encode_text(p.text_ids, weights, lora, cfg));
    }
    return contrastive_loss(similarity_matrix(text_embs, video_embs, cfg.temperature)).total;
}

TrainableGrads param_grad(const std::vector<SynthPair>& pairs, const EncoderWeights& weights,
                          const LoraParams& lora, const ClipPositionalEmbeddings& cpe,
                          const ModelConfig& cfg, const MergeSchedule& sched, GradMode mode) {
    if (mode == GradMode::analytic) {
        return traced_batch_gradients(pairs, weights, lora, cpe, cfg, sched).grads;
    }
    // Finite differences get expensive fast; refuse anything beyond micro shapes.
    require(cfg.width <= 32 && cfg.num_layers <= 4 && cfg.tokens_per_frame <= 20 && pairs.size() <= 8,
            "param_grad: finite-difference mode requires a micro configuration "
            "(width <= 32, layers <= 4, tokens <= 20, batch <= 8)");

    LoraParams lora_work = lora;
    ClipPositionalEmbeddings cpe_work = cpe;
    // Step large enough to dominate the float32 forward noise; curvature error
    // at h^2 stays far below the 1e-3 agreement budget.
    const double h = 5e-3;
    auto loss_at = [&]() {
        return batch_loss_plain(pairs, weights, &lora_work, &cpe_work, cfg, sched);
    };

    TrainableGrads grads;
    grads.lora.rank = lora.rank;
    grads.lora.alpha = lora.alpha;
    grads.loss = loss_at();

    auto central_diff = [&](float& theta) {
        const float orig = theta;
        theta = static_cast<float>(orig + h);
        const float hi = theta;
        const double up = loss_at();
        theta = static_cast<float>(orig - h);
        const double down = loss_at();
        const double actual = static_cast<double>(hi) - theta;
        theta = orig;
        return static_cast<float>((up - down) / actual);
    };
    auto diff_tower = [&](LoraTower& work, LoraTower& out) {
        out.layers.resize(work.layers.size());
        for (size_t l = 0; l < work.layers.size(); ++l) {
            auto diff_mat = [&](Mat& src, Mat& dst) {
                dst = Mat(src.rows, src.cols);
                for (size_t i = 0; i < src.data.size(); ++i) dst.data[i] = central_diff(src.data[i]);
            };
            diff_mat(work.layers[l].q_down, out.layers[l].q_down);
            diff_mat(work.layers[l].q_up, out.layers[l].q_up);
            diff_mat(work.layers[l].k_down, out.layers[l].k_down);
            diff_mat(work.layers[l].k_up, out.layers[l].k_up);
            diff_mat(work.layers[l].v_down, out.layers[l].v_down);
            diff_mat(work.layers[l].v_up, out.layers[l].v_up);
        }
    };
    diff_tower(lora_work.visual, grads.lora.visual);
    diff_tower(lora_work.text, grads.lora.text);
    for (Mat& step : cpe_work.steps) {
        Mat g(step.rows, step.cols);
        for (size_t i = 0; i < step.data.size(); ++i) g.data[i] = central_diff(step.data[i]);
        grads.cpe.steps.push_back(std::move(g));
    }
    return grads;
}

TrainResult train_toy(const SynthDataset& data, const ModelConfig& cfg, const MergeSchedule& sched,
                      const EncoderWeights& weights, const TrainSettings& settings) {
    require(data.pairs.size() >= 2, "train_toy: need at least 2 pairs");
    require(settings.steps >= 1, "train_toy: steps must be >= 1");

    TrainResult result;
    result.lora = init_lora(cfg, settings.seed);
    result.cpe = init_cpe(cfg, sched);

    // Momentum buffers, one per trainable tensor.
    LoraParams vel_lora = result.lora;
    auto zero_tower = [](LoraTower& t) {
        for (LoraLayer& l : t.layers) {
            for (Mat* m : {&l.q_down, &l.q_up, &l.k_down, &l.k_up, &l.v_down, &l.v_up}) {
                std::fill(m->data.begin(), m->data.end(), 0.0f);
            }
        }
    };
    zero_tower(vel_lora.visual);
    zero_tower(vel_lora.text);
    ClipPositionalEmbeddings vel_cpe = result.cpe;  // already zeros

    const float lr = settings.learning_rate;
    const float mu = settings.momentum;
    auto sgd_mat = [&](Mat& param, Mat& vel, const Mat& grad) {
        for (size_t i = 0; i < param.data.size(); ++i) {
            vel.data[i] = mu * vel.data[i] - lr * grad.data[i];
            param.data[i] += vel.data[i];
        }
    };

    for (int step = 0; step < settings.steps; ++step) {
        BatchGradResult res;
        try {
            res = traced_batch_gradients(data.pairs, weights, result.lora, result.cpe, cfg, sched);
        } catch (const ContractViolation& e) {
            // Step 0 ran on validated inputs, so a later contract failure can
            // only come from numerically exploded parameters.
            if (step == 0) throw;
            throw DivergenceError("train_toy: loss diverged at step " + std::to_string(step) + " (" +
                                  e.what() + ")");
        }
        if (!std::isfinite(res.loss)) {
            throw DivergenceError("train_toy: loss diverged at step " + std::to_string(step));
        }
        if (step == 0) result.initial_loss = res.loss;
        if (step % settings.log_every == 0) {
            result.log.push_back({step, res.loss, res.train_r1});
        }
        auto step_tower = [&](LoraTower& param, LoraTower& vel, const LoraTower& grad) {
            for (size_t l = 0; l < param.layers.size(); ++l) {
                sgd_mat(param.layers[l].q_down, vel.layers[l].q_down, grad.layers[l].q_down);
                sgd_mat(param.layers[l].q_up, vel.layers[l].q_up, grad.layers[l].q_up);
                sgd_mat(param.layers[l].k_down, vel.layers[l].k_down, grad.layers[l].k_down);
                sgd_mat(param.layers[l].k_up, vel.layers[l].k_up, grad.layers[l].k_up);
                sgd_mat(param.layers[l].v_down, vel.layers[l].v_down, grad.layers[l].v_down);
                sgd_mat(param.layers[l].v_up, vel.layers[l].v_up, grad.layers[l].v_up);
            }
        };
        step_tower(result.lora.visual, vel_lora.visual, res.grads.lora.visual);
        step_tower(result.lora.text, vel_lora.text, res.grads.lora.text);
        for (size_t s = 0; s < result.cpe.steps.size(); ++s) {
            sgd_mat(result.cpe.steps[s], vel_cpe.steps[s], res.grads.cpe.steps[s]);
        }
    }

    // Post-update evaluation for the final record.
    BatchGradResult final_res;
    try {
        final_res = traced_batch_gradients(data.pairs, weights, result.lora, result.cpe, cfg, sched);
    } catch (const ContractViolation& e) {
        throw DivergenceError("train_toy: loss diverged after the final step (" + std::string(e.what()) +
                              ")");
    }
    result.final_loss = final_res.loss;
    result.final_train_r1 = final_res.train_r1;
    result.log.push_back({settings.steps, final_res.loss, final_res.train_r1});
    return result;
}

}  // namespace tokmerge
