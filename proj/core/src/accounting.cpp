#include "tokmerge/accounting.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"
#include "tokmerge/encoder.hpp"
#include "tokmerge/synthgen.hpp"

namespace tokmerge {

namespace {

FlopsReport estimate_from_counts(const ModelConfig& cfg, const TokenCountReport& counts) {
    FlopsReport rep;
    const long long d = cfg.width;
    for (const LayerCounts& lc : counts.layers) {
        LayerFlops lf;
        lf.layer = lc.layer;
        lf.units = lc.clip_count;
        const long long n_attn = lc.tokens_after_cross;
        const long long n_ffn = lc.tokens_after_intra;
        lf.proj_macs = lf.units * 4 * n_attn * d * d;
        lf.attn_macs = lf.units * 2 * n_attn * n_attn * d;
        // two FFN matmuls: n x D @ D x ffn and n x ffn @ ffn x D
        lf.ffn_macs = lf.units * 2 * n_ffn * d * static_cast<long long>(cfg.ffn_dim);
        rep.layers.push_back(lf);
    }
    const long long patches = cfg.tokens_per_frame - 1;
    const long long patch_in = static_cast<long long>(cfg.patch_size) * cfg.patch_size * 3;
    rep.patch_embed_macs = static_cast<long long>(cfg.frame_count) * patches * patch_in * d;
    rep.total_macs = rep.patch_embed_macs;
    for (const LayerFlops& lf : rep.layers) rep.total_macs += lf.total();
    rep.gflops = static_cast<double>(rep.total_macs) / 1e9;
    return rep;
}

}  // namespace

FlopsReport estimate_flops(const ModelConfig& cfg, const MergeSchedule& sched) {
    FlopsReport rep = estimate_from_counts(cfg, predict_token_counts(cfg, sched));

    MergeSchedule identity;
    identity.frame_count = sched.frame_count;
    const FlopsReport base = estimate_from_counts(cfg, predict_token_counts(cfg, identity));
    rep.baseline_gflops = base.gflops;
    rep.fraction = rep.gflops / base.gflops;
    return rep;
}

std::string FlopsReport::to_table() const {
    std::ostringstream os;
    os << "layer  units      proj MMACs      attn MMACs       ffn MMACs\n";
    char buf[128];
    for (const LayerFlops& lf : layers) {
        std::snprintf(buf, sizeof(buf), "%5d  %5lld  %14.2f  %14.2f  %14.2f\n", lf.layer, lf.units,
                      lf.proj_macs / 1e6, lf.attn_macs / 1e6, lf.ffn_macs / 1e6);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "patch embedding: %.2f MMACs\n", patch_embed_macs / 1e6);
    os << buf;
    std::snprintf(buf, sizeof(buf), "total: %.1f GFLOPs (%.0f%% of %.1f GFLOPs no-merge baseline)\n",
                  gflops, 100.0 * fraction, baseline_gflops);
    os << buf;
    os << "convention: 1 MAC = 1 FLOP; layernorm/softmax/bias/GELU and merge\n"
          "similarity costs excluded (sub-1% at these shapes)\n";
    return os.str();
}

std::string FlopsReport::to_json() const {
    nlohmann::json doc;
    nlohmann::json layer_arr = nlohmann::json::array();
    for (const LayerFlops& lf : layers) {
        layer_arr.push_back({{"layer", lf.layer},
                             {"units", lf.units},
                             {"proj_macs", lf.proj_macs},
                             {"attn_macs", lf.attn_macs},
                             {"ffn_macs", lf.ffn_macs}});
    }
    doc["layers"] = std::move(layer_arr);
    doc["patch_embed_macs"] = patch_embed_macs;
    doc["total_macs"] = total_macs;
    doc["gflops"] = gflops;
    doc["baseline_gflops"] = baseline_gflops;
    doc["fraction"] = fraction;
    doc["mac_convention"] = "1 MAC = 1 FLOP";
    doc["excluded"] = "layernorm, softmax, bias, gelu, merge similarity";
    return doc.dump(2);
}

namespace {

struct Stats {
    double median = 0.0, mean = 0.0, stddev = 0.0;
};

Stats summarize(std::vector<double> xs) {
    Stats s;
    std::sort(xs.begin(), xs.end());
    const size_t n = xs.size();
    s.median = n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
    for (double x : xs) s.mean += x;
    s.mean /= static_cast<double>(n);
    for (double x : xs) s.stddev += (x - s.mean) * (x - s.mean);
    s.stddev = n > 1 ? std::sqrt(s.stddev / static_cast<double>(n - 1)) : 0.0;
    return s;
}

}  // namespace

BenchReport bench_forward(const ModelConfig& cfg, const MergeSchedule& sched, int batch, int repeats,
                          uint64_t seed, int threads) {
    require(repeats >= 3, "bench_forward: repeats must be >= 3");
    require(batch >= 1, "bench_forward: batch must be >= 1");
    cfg.validate();
    sched.validate_against(cfg);

    SynthSpec spec;
    spec.num_pairs = batch;
    spec.frame_count = cfg.frame_count;
    spec.tokens_per_frame = cfg.tokens_per_frame;
    spec.width = cfg.width;
    spec.redundancy = 0.7;
    spec.subject_count = 2;
    spec.seed = seed;
    const SynthDataset data = generate(spec);

    const EncoderWeights weights = init_encoder_weights(cfg, seed + 1);
    MergeSchedule identity;
    identity.frame_count = cfg.frame_count;

    auto run = [&](const MergeSchedule& s) {
        std::vector<double> vps;
        for (int rep = -1; rep < repeats; ++rep) {  // rep -1 is the warm-up
            const auto t0 = std::chrono::steady_clock::now();
            for (const SynthPair& pair : data.pairs) {
                encode_video(pair.frames, weights, nullptr, nullptr, cfg, s, threads);
            }
            const auto t1 = std::chrono::steady_clock::now();
            if (rep < 0) continue;
            const double secs = std::chrono::duration<double>(t1 - t0).count();
            vps.push_back(static_cast<double>(batch) / secs);
        }
        return summarize(vps);
    };

    const Stats merged = run(sched);
    const Stats baseline = run(identity);

    BenchReport rep;
    rep.batch = batch;
    rep.repeats = repeats;
    rep.threads = threads;
    rep.seed = seed;
    rep.merged_vps_median = merged.median;
    rep.merged_vps_mean = merged.mean;
    rep.merged_vps_stddev = merged.stddev;
    rep.baseline_vps_median = baseline.median;
    rep.baseline_vps_mean = baseline.mean;
    rep.baseline_vps_stddev = baseline.stddev;
    rep.speedup = merged.median / baseline.median;
    return rep;
}

std::string BenchReport::to_table() const {
    char buf[256];
    std::ostringstream os;
    std::snprintf(buf, sizeof(buf), "batch=%d repeats=%d threads=%d seed=%llu\n", batch, repeats, threads,
                  static_cast<unsigned long long>(seed));
    os << buf;
    std::snprintf(buf, sizeof(buf), "merged:   %.2f videos/s (mean %.2f +/- %.2f)\n", merged_vps_median,
                  merged_vps_mean, merged_vps_stddev);
    os << buf;
    std::snprintf(buf, sizeof(buf), "baseline: %.2f videos/s (mean %.2f +/- %.2f)\n", baseline_vps_median,
                  baseline_vps_mean, baseline_vps_stddev);
    os << buf;
    std::snprintf(buf, sizeof(buf), "speedup: %.2fx\n", speedup);
    os << buf;
    return os.str();
}

std::string BenchReport::to_json() const {
    nlohmann::json doc;
    doc["batch"] = batch;
    doc["repeats"] = repeats;
    doc["threads"] = threads;
    doc["seed"] = seed;
    doc["merged"] = {{"vps_median", merged_vps_median},
                     {"vps_mean", merged_vps_mean},
                     {"vps_stddev", merged_vps_stddev}};
    doc["baseline"] = {{"vps_median", baseline_vps_median},
                       {"vps_mean", baseline_vps_mean},
                       {"vps_stddev", baseline_vps_stddev}};
    doc["speedup"] = speedup;
    return doc.dump(2);
}

}  // namespace tokmerge
