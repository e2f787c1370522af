#include <benchmark/benchmark.h>

#include "tokmerge/encoder.hpp"
#include "tokmerge/synthgen.hpp"

using namespace tokmerge;

namespace {

std::vector<Mat> synth_frames(const ModelConfig& cfg, uint64_t seed) {
    SynthSpec spec;
    spec.num_pairs = 1;
    spec.frame_count = cfg.frame_count;
    spec.tokens_per_frame = cfg.tokens_per_frame;
    spec.width = cfg.width;
    spec.redundancy = 0.7;
    spec.seed = seed;
    return generate(spec).pairs[0].frames;
}

}  // namespace

static void MatmulSquare(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    Rng rng(1);
    const Mat a = rng.gaussian(n, n, 1.0f);
    const Mat b = rng.gaussian(n, n, 1.0f);
    for (auto _ : state) {
        Mat c = matmul(a, b);
        benchmark::DoNotOptimize(c.data.data());
    }
    state.SetComplexityN(n);
}
BENCHMARK(MatmulSquare)->RangeMultiplier(2)->Range(16, 256)->Complexity();

static void BipartiteMatch(benchmark::State& state) {
    const int t = static_cast<int>(state.range(0));
    Rng rng(2);
    const TokenSet ts = make_frame_tokens(rng.gaussian(t, 64, 1.0f), 0, 0);
    const int merge = t / 4;
    for (auto _ : state) {
        MergePlan plan = bipartite_soft_match(ts, merge, true);
        benchmark::DoNotOptimize(plan.pairs.data());
    }
}
BENCHMARK(BipartiteMatch)->RangeMultiplier(2)->Range(16, 256);

static void ToyForwardMerged(benchmark::State& state) {
    const ModelConfig cfg = preset_config("toy");
    const EncoderWeights w = init_encoder_weights(cfg, 3);
    const MergeSchedule sched = parse_schedule(preset_default_schedule("toy"));
    const std::vector<Mat> frames = synth_frames(cfg, 4);
    for (auto _ : state) {
        std::vector<float> emb = encode_video(frames, w, nullptr, nullptr, cfg, sched);
        benchmark::DoNotOptimize(emb.data());
    }
}
BENCHMARK(ToyForwardMerged);

static void ToyForwardBaseline(benchmark::State& state) {
    const ModelConfig cfg = preset_config("toy");
    const EncoderWeights w = init_encoder_weights(cfg, 3);
    const MergeSchedule sched = parse_schedule(preset_identity_schedule("toy"));
    const std::vector<Mat> frames = synth_frames(cfg, 4);
    for (auto _ : state) {
        std::vector<float> emb = encode_video(frames, w, nullptr, nullptr, cfg, sched);
        benchmark::DoNotOptimize(emb.data());
    }
}
BENCHMARK(ToyForwardBaseline);

BENCHMARK_MAIN();
