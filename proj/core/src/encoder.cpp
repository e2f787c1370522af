#include "tokmerge/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <thread>

namespace tokmerge {

namespace {

// x @ w + b, plus the low-rank delta alpha * (x @ down) @ up when given.
Mat projected(const Mat& x, const Mat& w, const std::vector<float>& b, const Mat* down, const Mat* up,
              float alpha) {
    Mat out = matmul(x, w);
    add_row_broadcast_inplace(out, b.data());
    if (down != nullptr && up != nullptr && down->cols > 0) {
        Mat delta = matmul(matmul(x, *down), *up);
        if (alpha != 1.0f) delta = scale(delta, alpha);
        add_inplace(out, delta);
    }
    return out;
}

Mat ffn_forward(const Mat& x, const LayerWeights& lw) {
    Mat h = matmul(x, lw.w_fc1);
    add_row_broadcast_inplace(h, lw.b_fc1.data());
    h = gelu(h);
    Mat out = matmul(h, lw.w_fc2);
    add_row_broadcast_inplace(out, lw.b_fc2.data());
    return out;
}

void run_over_frames(int frame_count, int threads, const std::function<void(int)>& work) {
    if (threads <= 1 || frame_count <= 1) {
        for (int f = 0; f < frame_count; ++f) work(f);
        return;
    }
    const int n = std::min(threads, frame_count);
    std::vector<std::thread> pool;
    pool.reserve(n);
    for (int t = 0; t < n; ++t) {
        pool.emplace_back([&, t] {
            for (int f = t; f < frame_count; f += n) work(f);
        });
    }
    for (std::thread& th : pool) th.join();
}

}  // namespace

bool LoraParams::is_zero() const {
    auto tower_zero = [](const LoraTower& t) {
        for (const LoraLayer& l : t.layers) {
            for (const Mat* m : {&l.q_up, &l.k_up, &l.v_up, &l.q_down, &l.k_down, &l.v_down}) {
                for (float v : m->data)
                    if (v != 0.0f) return false;
            }
        }
        return true;
    };
    return tower_zero(visual) && tower_zero(text);
}

Mat mhsa(const Mat& x, const ModelConfig& cfg, const LayerWeights& lw, const LoraLayer* lora,
         float lora_alpha, const std::vector<int>* key_sizes, bool causal) {
    const int t = x.rows;
    const int d = cfg.width;
    const int h = cfg.heads;
    const int dh = cfg.head_dim();
    require(x.cols == d, "mhsa: width mismatch");
    require(t >= 1, "mhsa: empty input");

    const Mat q = projected(x, lw.wq, lw.bq, lora ? &lora->q_down : nullptr, lora ? &lora->q_up : nullptr, lora_alpha);
    const Mat k = projected(x, lw.wk, lw.bk, lora ? &lora->k_down : nullptr, lora ? &lora->k_up : nullptr, lora_alpha);
    const Mat v = projected(x, lw.wv, lw.bv, lora ? &lora->v_down : nullptr, lora ? &lora->v_up : nullptr, lora_alpha);

    std::vector<float> log_size;
    if (key_sizes != nullptr) {
        require(static_cast<int>(key_sizes->size()) == t, "mhsa: key size count mismatch");
        log_size.resize(t);
        for (int j = 0; j < t; ++j) log_size[j] = std::log(static_cast<float>((*key_sizes)[j]));
    }

    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
    Mat concat(t, d);
    for (int head = 0; head < h; ++head) {
        const Mat qh = slice_cols(q, head * dh, (head + 1) * dh);
        const Mat kh = slice_cols(k, head * dh, (head + 1) * dh);
        const Mat vh = slice_cols(v, head * dh, (head + 1) * dh);
        Mat scores = matmul(qh, transpose(kh));
        for (int i = 0; i < t; ++i) {
            float* row = scores.row(i);
            for (int j = 0; j < t; ++j) {
                row[j] *= inv_sqrt;
                if (!log_size.empty()) row[j] += log_size[j];
                if (causal && j > i) row[j] = -1e30f;
            }
        }
        const Mat attn = softmax_rows(scores);
        paste_cols(concat, matmul(attn, vh), head * dh);
    }
    Mat out = matmul(concat, lw.wo);
    add_row_broadcast_inplace(out, lw.bo.data());
    return out;
}

TokenSet attention(const TokenSet& ts, const ModelConfig& cfg, const LayerWeights& lw,
                   const LoraLayer* lora, float lora_alpha) {
    require(ts.count() >= 1, "attention: empty token set");
    TokenSet out = ts;
    out.features = mhsa(ts.features, cfg, lw, lora, lora_alpha,
                        cfg.proportional_attention ? &ts.sizes : nullptr, /*causal=*/false);
    return out;
}

TokenSet imgme_block(const TokenSet& frame, const ModelConfig& cfg, const LayerWeights& lw,
                     const LoraLayer* lora, int img_r) {
    require(img_r >= 0 && img_r < frame.count(), "imgme_block: infeasible r");
    for (int id : frame.clip_ids) require(id == frame.clip_ids[0], "imgme_block: expects a single clip");

    TokenSet ts = frame;
    const Mat normed = layer_norm(ts.features, lw.ln1_gamma, lw.ln1_beta);
    add_inplace(ts.features, mhsa(normed, cfg, lw, lora, cfg.lora_alpha,
                                  cfg.proportional_attention ? &ts.sizes : nullptr, false));
    if (img_r > 0) {
        const MergePlan plan = bipartite_soft_match(ts, img_r, cfg.protect_cls);
        ts = apply_merge(ts, plan, cfg.size_weighted_merge);
    }
    const Mat normed2 = layer_norm(ts.features, lw.ln2_gamma, lw.ln2_beta);
    add_inplace(ts.features, ffn_forward(normed2, lw));
    return ts;
}

TokenSet clipme_block(const std::vector<TokenSet>& clips, const ModelConfig& cfg,
                      const LayerWeights& lw, const LoraLayer* lora, const Mat* cpe,
                      double keep_cross, double keep_intra, bool skip_cross, bool intra_merge,
                      int new_clip_id, int* attn_tokens_out) {
    require(!clips.empty(), "clipme_block: no clips");
    std::vector<TokenSet> staged = clips;
    if (cpe != nullptr) {
        require(cpe->rows == static_cast<int>(clips.size()), "clipme_block: clip slot count != cpe rows");
        require(cpe->cols == clips[0].width(), "clipme_block: cpe width mismatch");
        for (size_t s = 0; s < staged.size(); ++s) {
            add_row_broadcast_inplace(staged[s].features, cpe->row(static_cast<int>(s)));
        }
    }
    TokenSet ts = concat_token_sets(staged);

    if (!skip_cross && clips.size() > 1) {
        const int kept = kept_token_count(ts.count(), keep_cross);
        const MergePlan plan = bipartite_soft_match(ts, ts.count() - kept, cfg.protect_cls);
        ts = apply_merge(ts, plan, cfg.size_weighted_merge);
    }
    for (int& id : ts.clip_ids) id = new_clip_id;

    if (attn_tokens_out != nullptr) *attn_tokens_out = ts.count();
    const Mat normed = layer_norm(ts.features, lw.ln1_gamma, lw.ln1_beta);
    add_inplace(ts.features, mhsa(normed, cfg, lw, lora, cfg.lora_alpha,
                                  cfg.proportional_attention ? &ts.sizes : nullptr, false));

    if (intra_merge && keep_intra < 1.0) {
        const int kept = kept_token_count(ts.count(), keep_intra);
        const MergePlan plan = bipartite_soft_match(ts, ts.count() - kept, cfg.protect_cls);
        ts = apply_merge(ts, plan, cfg.size_weighted_merge);
    }
    const Mat normed2 = layer_norm(ts.features, lw.ln2_gamma, lw.ln2_beta);
    add_inplace(ts.features, ffn_forward(normed2, lw));
    return ts;
}

std::vector<float> encode_video(const std::vector<Mat>& frames, const EncoderWeights& weights,
                                const LoraParams* lora, const ClipPositionalEmbeddings* cpe,
                                const ModelConfig& cfg, const MergeSchedule& sched, int threads,
                                VideoTrace* trace) {
    cfg.validate();
    sched.validate_against(cfg);
    require(static_cast<int>(frames.size()) == cfg.frame_count, "encode_video: frame count mismatch");
    for (const Mat& f : frames) {
        require(f.rows == cfg.tokens_per_frame && f.cols == cfg.width, "encode_video: frame shape mismatch");
    }
    require(static_cast<int>(weights.visual.layers.size()) == cfg.num_layers,
            "encode_video: layer count mismatch");
    if (lora != nullptr) {
        require(static_cast<int>(lora->visual.layers.size()) == cfg.num_layers,
                "encode_video: lora layer count mismatch");
    }
    auto lora_layer = [&](int layer) -> const LoraLayer* {
        if (lora == nullptr) return nullptr;
        return &lora->visual.layers[layer];
    };
    if (cpe != nullptr) {
        require(cpe->steps.size() == sched.steps.size(), "encode_video: cpe step count mismatch");
    }

    const int image_layers = std::min(sched.start_clip, cfg.num_layers + 1) - 1;

    std::vector<TokenSet> clips(frames.size());
    // Per frame, per image layer: tokens entering attention. Identical across
    // frames by construction; verified below before filling the trace.
    std::vector<std::vector<int>> image_attn(frames.size());
    run_over_frames(static_cast<int>(frames.size()), threads, [&](int f) {
        TokenSet ts = make_frame_tokens(frames[f], f, f);
        for (int layer = 1; layer <= image_layers; ++layer) {
            image_attn[f].push_back(ts.count());
            ts = imgme_block(ts, cfg, weights.visual.layers[layer - 1], lora_layer(layer - 1), sched.img_r);
        }
        clips[f] = std::move(ts);
    });

    std::vector<LayerCounts> observed;
    for (int layer = 1; layer <= image_layers; ++layer) {
        for (size_t f = 1; f < frames.size(); ++f) {
            require(image_attn[f][layer - 1] == image_attn[0][layer - 1],
                    "encode_video: frame token counts diverged");
        }
        LayerCounts lc;
        lc.layer = layer;
        lc.kind = LayerKind::image_merge;
        lc.clip_count = static_cast<int>(frames.size());
        lc.tokens_after_cross = image_attn[0][layer - 1];
        lc.tokens_after_intra = image_attn[0][layer - 1] - sched.img_r;
        lc.attention_capacity = lc.tokens_after_cross;
        observed.push_back(lc);
    }

    size_t next_step = 0;
    for (int layer = image_layers + 1; layer <= cfg.num_layers; ++layer) {
        const LayerWeights& lw = weights.visual.layers[layer - 1];
        const LoraLayer* ll = lora_layer(layer - 1);
        const bool is_step = next_step < sched.steps.size() && sched.steps[next_step].layer == layer;
        int attn_tokens = 0;
        if (is_step) {
            const int group = sched.group_size(next_step);
            const int new_count = sched.steps[next_step].clip_count;
            const Mat* cpe_mat = cpe != nullptr ? &cpe->steps[next_step] : nullptr;
            std::vector<TokenSet> merged(new_count);
            for (int g = 0; g < new_count; ++g) {
                std::vector<TokenSet> group_clips(clips.begin() + static_cast<long>(g) * group,
                                                  clips.begin() + static_cast<long>(g + 1) * group);
                merged[g] = clipme_block(group_clips, cfg, lw, ll, cpe_mat, sched.keep_cross,
                                         sched.keep_intra, /*skip_cross=*/false, /*intra_merge=*/true,
                                         g, &attn_tokens);
            }
            clips = std::move(merged);
            ++next_step;
        } else {
            const bool in_gap = next_step < sched.steps.size();
            const bool intra_on = in_gap ? sched.gap_intra : sched.tail_intra;
            for (size_t c = 0; c < clips.size(); ++c) {
                clips[c] = clipme_block({clips[c]}, cfg, lw, ll, nullptr, sched.keep_cross,
                                        sched.keep_intra, /*skip_cross=*/true, intra_on,
                                        clips[c].clip_ids.empty() ? static_cast<int>(c) : clips[c].clip_ids[0],
                                        &attn_tokens);
            }
        }
        LayerCounts lc;
        lc.layer = layer;
        lc.kind = is_step ? LayerKind::clip_step : LayerKind::clip_pass;
        lc.clip_count = static_cast<int>(clips.size());
        lc.group_size = is_step ? sched.group_size(next_step - 1) : 1;
        lc.tokens_after_cross = attn_tokens;
        lc.tokens_after_intra = clips.empty() ? 0 : clips[0].count();
        lc.attention_capacity = attn_tokens;
        observed.push_back(lc);
    }

    TokenSet final_tokens = concat_token_sets(clips);
    if (cfg.protect_cls) {
        require(final_tokens.cls_count() == cfg.frame_count, "encode_video: CLS token lost");
    }

    const Mat normed = layer_norm(final_tokens.features, weights.visual.ln_final_gamma,
                                  weights.visual.ln_final_beta);
    // Pooling as one weighted row combination, shared with the traced path.
    std::vector<std::pair<int, float>> pool_terms;
    if (cfg.pool == VideoPool::cls_mean) {
        int cls = 0;
        for (int i = 0; i < final_tokens.count(); ++i) cls += final_tokens.is_cls[i] != 0;
        require(cls > 0, "encode_video: no CLS token to pool");
        const float w = 1.0f / static_cast<float>(cls);
        for (int i = 0; i < final_tokens.count(); ++i) {
            if (final_tokens.is_cls[i]) pool_terms.push_back({i, w});
        }
    } else {
        const double total = static_cast<double>(final_tokens.total_size());
        for (int i = 0; i < final_tokens.count(); ++i) {
            pool_terms.push_back({i, static_cast<float>(final_tokens.sizes[i] / total)});
        }
    }
    const Mat pooled = apply_rows_spec(normed, {pool_terms});
    const Mat emb = matmul(pooled, weights.visual.proj);

    if (trace != nullptr) {
        trace->layers = std::move(observed);
        trace->final_tokens = std::move(final_tokens);
    }
    return emb.data;
}

std::vector<float> encode_text(const std::vector<int>& token_ids, const EncoderWeights& weights,
                               const LoraParams* lora, const ModelConfig& cfg) {
    require(!token_ids.empty(), "encode_text: empty token sequence");
    require(static_cast<int>(token_ids.size()) <= cfg.text_max_len, "encode_text: sequence too long");
    const int n = static_cast<int>(token_ids.size());
    Mat x(n, cfg.width);
    for (int i = 0; i < n; ++i) {
        const int id = token_ids[i];
        require(id >= 0 && id < cfg.text_vocab_size, "encode_text: unknown token id");
        const float* emb = weights.text.token_embedding.row(id);
        const float* pos = weights.text.pos_embedding.row(i);
        float* dst = x.row(i);
        for (int j = 0; j < cfg.width; ++j) dst[j] = emb[j] + pos[j];
    }
    if (lora != nullptr) {
        require(lora->text.layers.size() == weights.text.layers.size(),
                "encode_text: lora layer count mismatch");
    }
    for (size_t layer = 0; layer < weights.text.layers.size(); ++layer) {
        const LayerWeights& lw = weights.text.layers[layer];
        const LoraLayer* ll = lora != nullptr ? &lora->text.layers[layer] : nullptr;
        const Mat normed = layer_norm(x, lw.ln1_gamma, lw.ln1_beta);
        add_inplace(x, mhsa(normed, cfg, lw, ll, cfg.lora_alpha, nullptr, /*causal=*/true));
        const Mat normed2 = layer_norm(x, lw.ln2_gamma, lw.ln2_beta);
        add_inplace(x, ffn_forward(normed2, lw));
    }
    const Mat normed = layer_norm(x, weights.text.ln_final_gamma, weights.text.ln_final_beta);
    Mat last(1, cfg.width);
    std::copy(normed.row(n - 1), normed.row(n - 1) + cfg.width, last.row(0));
    return matmul(last, weights.text.proj).data;
}

namespace {

LayerWeights init_layer(Rng& rng, int width, int ffn_dim) {
    LayerWeights lw;
    const float std_d = 1.0f / std::sqrt(static_cast<float>(width));
    const float std_f = 1.0f / std::sqrt(static_cast<float>(ffn_dim));
    lw.ln1_gamma.assign(width, 1.0f);
    lw.ln1_beta.assign(width, 0.0f);
    lw.wq = rng.gaussian(width, width, std_d);
    lw.wk = rng.gaussian(width, width, std_d);
    lw.wv = rng.gaussian(width, width, std_d);
    lw.wo = rng.gaussian(width, width, std_d);
    lw.bq.assign(width, 0.0f);
    lw.bk.assign(width, 0.0f);
    lw.bv.assign(width, 0.0f);
    lw.bo.assign(width, 0.0f);
    lw.ln2_gamma.assign(width, 1.0f);
    lw.ln2_beta.assign(width, 0.0f);
    lw.w_fc1 = rng.gaussian(width, ffn_dim, std_d);
    lw.w_fc2 = rng.gaussian(ffn_dim, width, std_f);
    lw.b_fc1.assign(ffn_dim, 0.0f);
    lw.b_fc2.assign(width, 0.0f);
    return lw;
}

}  // namespace

EncoderWeights init_encoder_weights(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    // All tensors are drawn from one splitmix64 stream in a fixed order, so a
    // seed fully determines the model.
    Rng rng(seed);
    const float std_d = 1.0f / std::sqrt(static_cast<float>(cfg.width));
    EncoderWeights w;
    const int patch_in = cfg.patch_size * cfg.patch_size * 3;
    w.visual.patch_proj = rng.gaussian(patch_in, cfg.width, 1.0f / std::sqrt(static_cast<float>(patch_in)));
    w.visual.layers.reserve(cfg.num_layers);
    for (int l = 0; l < cfg.num_layers; ++l) w.visual.layers.push_back(init_layer(rng, cfg.width, cfg.ffn_dim));
    w.visual.ln_final_gamma.assign(cfg.width, 1.0f);
    w.visual.ln_final_beta.assign(cfg.width, 0.0f);
    w.visual.proj = rng.gaussian(cfg.width, cfg.embed_dim, std_d);

    w.text.token_embedding = rng.gaussian(cfg.text_vocab_size, cfg.width, std_d);
    w.text.pos_embedding = rng.gaussian(cfg.text_max_len, cfg.width, std_d);
    w.text.layers.reserve(cfg.num_layers);
    for (int l = 0; l < cfg.num_layers; ++l) w.text.layers.push_back(init_layer(rng, cfg.width, cfg.ffn_dim));
    w.text.ln_final_gamma.assign(cfg.width, 1.0f);
    w.text.ln_final_beta.assign(cfg.width, 0.0f);
    w.text.proj = rng.gaussian(cfg.width, cfg.embed_dim, std_d);
    return w;
}

LoraParams init_lora(const ModelConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    LoraParams p;
    p.rank = cfg.lora_rank;
    p.alpha = cfg.lora_alpha;
    const float std_d = 1.0f / std::sqrt(static_cast<float>(cfg.width));
    auto tower = [&](LoraTower& t) {
        t.layers.resize(cfg.num_layers);
        for (LoraLayer& l : t.layers) {
            l.q_down = rng.gaussian(cfg.width, p.rank, std_d);
            l.q_up = Mat(p.rank, cfg.width);  // zero: the delta starts at 0
            l.k_down = rng.gaussian(cfg.width, p.rank, std_d);
            l.k_up = Mat(p.rank, cfg.width);
            l.v_down = rng.gaussian(cfg.width, p.rank, std_d);
            l.v_up = Mat(p.rank, cfg.width);
        }
    };
    tower(p.visual);
    tower(p.text);
    return p;
}

ClipPositionalEmbeddings init_cpe(const ModelConfig& cfg, const MergeSchedule& sched) {
    ClipPositionalEmbeddings cpe;
    cpe.steps.reserve(sched.steps.size());
    for (size_t k = 0; k < sched.steps.size(); ++k) {
        cpe.steps.emplace_back(sched.group_size(k), cfg.width);  // zero-initialized
    }
    return cpe;
}

EncoderWeights lora_merge(const EncoderWeights& weights, LoraParams& lora) {
    EncoderWeights merged = weights;
    auto fold = [&](std::vector<LayerWeights>& layers, LoraTower& t) {
        require(layers.size() == t.layers.size(), "lora_merge: layer count mismatch");
        for (size_t l = 0; l < layers.size(); ++l) {
            LoraLayer& ll = t.layers[l];
            add_inplace(layers[l].wq, scale(matmul(ll.q_down, ll.q_up), lora.alpha));
            add_inplace(layers[l].wk, scale(matmul(ll.k_down, ll.k_up), lora.alpha));
            add_inplace(layers[l].wv, scale(matmul(ll.v_down, ll.v_up), lora.alpha));
            for (Mat* m : {&ll.q_down, &ll.q_up, &ll.k_down, &ll.k_up, &ll.v_down, &ll.v_up}) {
                std::fill(m->data.begin(), m->data.end(), 0.0f);
            }
        }
    };
    fold(merged.visual.layers, lora.visual);
    fold(merged.text.layers, lora.text);
    return merged;
}

}  // namespace tokmerge
