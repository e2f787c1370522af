#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tokmerge/schedule.hpp"

namespace tokmerge {

struct LayerFlops {
    int layer = 0;
    long long units = 0;           // frames or clips attending in parallel
    long long proj_macs = 0;       // Q, K, V, O projections
    long long attn_macs = 0;       // scores + aggregation
    long long ffn_macs = 0;
    long long total() const { return proj_macs + attn_macs + ffn_macs; }
};

// Multiply-accumulate ledger for one video forward (video tower only, as in
// the published protocol). 1 MAC = 1 FLOP. LayerNorm, softmax, bias, GELU and
// merge-similarity bookkeeping are excluded (sub-1% at these shapes); the
// report footer says so.
struct FlopsReport {
    std::vector<LayerFlops> layers;
    long long patch_embed_macs = 0;
    long long total_macs = 0;
    double gflops = 0.0;
    double baseline_gflops = 0.0;  // same config, no merging
    double fraction = 0.0;         // gflops / baseline_gflops

    std::string to_table() const;
    std::string to_json() const;
};

// Pure function of (cfg, sched): per layer with n_attn tokens entering
// attention and n_ffn entering the FFN,
//   MACs = 4*n_attn*D^2 + 2*n_attn^2*D + 8*n_ffn*D^2
// per unit, plus F * patches * (patch_pixels*3) * D for the patch embedding.
FlopsReport estimate_flops(const ModelConfig& cfg, const MergeSchedule& sched);

struct BenchReport {
    int batch = 0;
    int repeats = 0;
    int threads = 1;
    uint64_t seed = 0;
    double merged_vps_median = 0.0;
    double merged_vps_mean = 0.0;
    double merged_vps_stddev = 0.0;
    double baseline_vps_median = 0.0;
    double baseline_vps_mean = 0.0;
    double baseline_vps_stddev = 0.0;
    double speedup = 0.0;  // merged median vps / baseline median vps

    std::string to_table() const;
    std::string to_json() const;
};

// Wall-clock throughput of encode_video under sched vs the no-merge baseline
// on the same synthetic inputs. One warm-up pass per pipeline is excluded;
// repeats must be >= 3; the headline figure is the median.
BenchReport bench_forward(const ModelConfig& cfg, const MergeSchedule& sched, int batch, int repeats,
                          uint64_t seed, int threads = 1);

}  // namespace tokmerge
