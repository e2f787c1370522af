// Command-line surface: token-count prediction, FLOPs estimation, live
// forward traces, merging-strategy tables, toy training and throughput
// benchmarks. Exit codes: 0 success, 2 usage/validation, 3 runtime failure.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "tokmerge/accounting.hpp"
#include "tokmerge/encoder.hpp"
#include "tokmerge/retrieval.hpp"
#include "tokmerge/schedule.hpp"
#include "tokmerge/synthgen.hpp"
#include "tokmerge/traced.hpp"
#include "tokmerge/weights_io.hpp"

namespace {

using namespace tokmerge;

// Relative output paths land under $TOKMERGE_OUTDIR when it is set.
std::string resolve_out(const std::string& path) {
    if (path.empty() || path.front() == '/') return path;
    const char* dir = std::getenv("TOKMERGE_OUTDIR");
    if (dir == nullptr || dir[0] == '\0') return path;
    std::string d = dir;
    if (d.back() != '/') d += '/';
    return d + path;
}

void emit(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text;
        if (!text.empty() && text.back() != '\n') std::cout << '\n';
        return;
    }
    const std::string resolved = resolve_out(out_path);
    std::ofstream out(resolved);
    require(out.good(), "cannot write " + resolved);
    out << text;
}

struct CommonOpts {
    std::string preset = "b32";
    std::string schedule;
    int frames = 0;
    std::string format = "table";
    std::string out;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool with_schedule = true) {
    cmd->add_option("--preset", opts.preset, "model preset: b32 | b16 | toy | micro")
        ->check(CLI::IsMember({"b32", "b16", "toy", "micro"}));
    if (with_schedule) {
        cmd->add_option("--schedule", opts.schedule,
                        "merge schedule, e.g. \"12@9:6@10:3@11:1 r=2 Rc=0.7 Ri=0.9\"");
    }
    cmd->add_option("--frames", opts.frames, "override the preset frame count");
    cmd->add_option("--format", opts.format, "output format")->check(CLI::IsMember({"json", "table"}));
    cmd->add_option("--out", opts.out, "write the report here instead of stdout");
}

ModelConfig config_for(const CommonOpts& opts) {
    ModelConfig cfg = preset_config(opts.preset);
    if (opts.frames > 0) cfg.frame_count = opts.frames;
    return cfg;
}

MergeSchedule schedule_for(const CommonOpts& opts) {
    const std::string text = opts.schedule.empty() ? preset_default_schedule(opts.preset) : opts.schedule;
    return parse_schedule(text);
}

int cmd_tokens(const CommonOpts& opts) {
    const ModelConfig cfg = config_for(opts);
    const TokenCountReport rep = predict_token_counts(cfg, schedule_for(opts));
    emit(opts.format == "json" ? rep.to_json() : rep.to_table(), opts.out);
    return 0;
}

int cmd_flops(const CommonOpts& opts) {
    const ModelConfig cfg = config_for(opts);
    const FlopsReport rep = estimate_flops(cfg, schedule_for(opts));
    emit(opts.format == "json" ? rep.to_json() : rep.to_table(), opts.out);
    return 0;
}

struct ForwardOpts {
    CommonOpts common;
    uint64_t seed = 1;
    int threads = 1;
    double redundancy = 0.7;
    std::string weights_path;
    std::string merge_map_path;
};

int cmd_forward(const ForwardOpts& opts) {
    ModelConfig cfg = config_for(opts.common);
    const MergeSchedule sched = schedule_for(opts.common);

    EncoderWeights weights;
    if (!opts.weights_path.empty()) {
        weights = load_weights(opts.weights_path, &cfg);
        if (opts.common.frames > 0) cfg.frame_count = opts.common.frames;
    } else {
        weights = init_encoder_weights(cfg, opts.seed);
    }

    SynthSpec spec;
    spec.num_pairs = 1;
    spec.frame_count = cfg.frame_count;
    spec.tokens_per_frame = cfg.tokens_per_frame;
    spec.width = cfg.width;
    spec.redundancy = opts.redundancy;
    spec.seed = opts.seed + 1;
    const SynthDataset data = generate(spec);

    VideoTrace trace;
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<float> emb =
        encode_video(data.pairs[0].frames, weights, nullptr, nullptr, cfg, sched, opts.threads, &trace);
    const auto t1 = std::chrono::steady_clock::now();
    const double wall = std::chrono::duration<double>(t1 - t0).count();

    double norm = 0.0;
    for (float v : emb) norm += double(v) * v;
    norm = std::sqrt(norm);
    require(std::isfinite(norm) && norm > 0.0, "forward produced a degenerate embedding");

    if (opts.common.format == "json") {
        nlohmann::json doc;
        nlohmann::json layers = nlohmann::json::array();
        for (const LayerCounts& lc : trace.layers) {
            layers.push_back({{"layer", lc.layer},
                              {"clip_count", lc.clip_count},
                              {"tokens_after_cross", lc.tokens_after_cross},
                              {"tokens_after_intra", lc.tokens_after_intra},
                              {"attention_capacity", lc.attention_capacity}});
        }
        doc["layers"] = std::move(layers);
        doc["final_token_count"] = trace.final_tokens.count();
        doc["embedding_norm"] = norm;
        doc["wall_seconds"] = wall;  // timing field; excluded from determinism checks
        emit(doc.dump(2), opts.common.out);
    } else {
        std::ostringstream os;
        os << "layer  clips   attn    ffn\n";
        char buf[80];
        for (const LayerCounts& lc : trace.layers) {
            std::snprintf(buf, sizeof(buf), "%5d  %5d  %5d  %5d\n", lc.layer, lc.clip_count,
                          lc.tokens_after_cross, lc.tokens_after_intra);
            os << buf;
        }
        std::snprintf(buf, sizeof(buf), "final tokens: %d\n", trace.final_tokens.count());
        os << buf;
        std::snprintf(buf, sizeof(buf), "embedding norm: %.6f\n", norm);
        os << buf;
        std::snprintf(buf, sizeof(buf), "wall seconds: %.6f\n", wall);
        os << buf;
        emit(os.str(), opts.common.out);
    }

    if (!opts.merge_map_path.empty()) {
        const std::string resolved = resolve_out(opts.merge_map_path);
        std::ofstream out(resolved);
        require(out.good(), "cannot write " + resolved);
        out << merge_map_json(trace.final_tokens, cfg.frame_count, cfg.tokens_per_frame);
    }
    return 0;
}

int cmd_ablate(const CommonOpts& opts) {
    require(opts.preset != "micro", "ablate: needs a 12-layer preset (b32, b16, toy)");
    const ModelConfig base = preset_config(opts.preset);
    // Merge-strategy families on the preset's own r / Rc / Ri.
    const MergeSchedule defaults = parse_schedule(preset_default_schedule(opts.preset));
    std::ostringstream params;
    params << " r=" << defaults.img_r << " Rc=" << defaults.keep_cross << " Ri=" << defaults.keep_intra;
    const std::vector<std::pair<std::string, std::string>> rows = {
        {"A0", "12@9:6@10:3@11:1"}, {"A1a", "12@9:4@10:1"}, {"A1b", "12@9:1"},
        {"A2a", "12@9:6@10:3"},     {"A2b", "12@9:4"},      {"A3a", "12@7:6@9:3@11:1"},
        {"A3b", "12@4:6@7:3@10:1"}, {"A3c", "12@1:6@5:3@9:1"},
    };

    nlohmann::json json_rows = nlohmann::json::array();
    std::ostringstream table;
    table << "row   schedule                   GFLOPs   frac    tokens  capacity\n";
    for (const auto& [label, pattern] : rows) {
        ModelConfig cfg = base;
        cfg.frame_count = 12;
        const MergeSchedule sched = parse_schedule(pattern + params.str());
        const TokenCountReport counts = predict_token_counts(cfg, sched);
        const FlopsReport flops = estimate_flops(cfg, sched);
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-4s  %-25s  %7.1f  %5.1f%%  %6ld  %8d\n", label.c_str(),
                      pattern.c_str(), flops.gflops, 100.0 * flops.fraction, counts.final_token_count,
                      counts.max_attention_capacity);
        table << buf;
        json_rows.push_back({{"row", label},
                             {"schedule", pattern + params.str()},
                             {"gflops", flops.gflops},
                             {"fraction", flops.fraction},
                             {"final_tokens", counts.final_token_count},
                             {"attention_capacity", counts.max_attention_capacity}});
    }
    if (opts.format == "json") {
        nlohmann::json doc;
        doc["preset"] = opts.preset;
        doc["rows"] = std::move(json_rows);
        emit(doc.dump(2), opts.out);
    } else {
        emit(table.str(), opts.out);
    }
    return 0;
}

struct TrainOpts {
    CommonOpts common;
    int pairs = 32;
    int steps = 200;
    uint64_t seed = 7;
    float lr = -1.0f;  // negative = library default
    float momentum = 0.9f;
    double redundancy = 0.8;
    std::string log_path;
    std::string state_out;
};

int cmd_train(const TrainOpts& opts) {
    const ModelConfig cfg = config_for(opts.common);
    const MergeSchedule sched = schedule_for(opts.common);
    const EncoderWeights weights = init_encoder_weights(cfg, opts.seed);

    SynthSpec spec;
    spec.num_pairs = opts.pairs;
    spec.frame_count = cfg.frame_count;
    spec.tokens_per_frame = cfg.tokens_per_frame;
    spec.width = cfg.width;
    spec.redundancy = opts.redundancy;
    spec.seed = opts.seed + 1;
    const SynthDataset data = generate(spec);

    TrainSettings settings;
    settings.steps = opts.steps;
    if (opts.lr > 0.0f) settings.learning_rate = opts.lr;
    settings.momentum = opts.momentum;
    settings.seed = opts.seed + 2;

    const TrainResult result = train_toy(data, cfg, sched, weights, settings);
    if (!opts.log_path.empty()) {
        const std::string resolved = resolve_out(opts.log_path);
        std::ofstream out(resolved);
        require(out.good(), "cannot write " + resolved);
        out << result.log_jsonl();
    } else if (opts.common.out.empty()) {
        std::cout << result.log_jsonl();
    }
    if (!opts.state_out.empty()) {
        save_trainable(resolve_out(opts.state_out), cfg, result.lora, result.cpe);
    }

    nlohmann::json summary;
    summary["initial_loss"] = result.initial_loss;
    summary["final_loss"] = result.final_loss;
    summary["loss_ratio"] = result.final_loss / result.initial_loss;
    summary["final_train_r1"] = result.final_train_r1;
    summary["steps"] = opts.steps;
    summary["pairs"] = opts.pairs;
    if (!opts.common.out.empty()) {
        emit(summary.dump(2), opts.common.out);
    } else {
        std::cout << summary.dump(2) << "\n";
    }
    return 0;
}

struct BenchOpts {
    CommonOpts common;
    int batch = 8;
    int repeats = 5;
    uint64_t seed = 3;
    int threads = 1;
};

int cmd_bench(const BenchOpts& opts) {
    const ModelConfig cfg = config_for(opts.common);
    const BenchReport rep =
        bench_forward(cfg, schedule_for(opts.common), opts.batch, opts.repeats, opts.seed, opts.threads);
    emit(opts.common.format == "json" ? rep.to_json() : rep.to_table(), opts.common.out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"progressive token-merging engine for text-video retrieval"};
    app.require_subcommand(1);

    CommonOpts tokens_opts;
    add_common(app.add_subcommand("tokens", "predict per-layer token counts"), tokens_opts);
    CommonOpts flops_opts;
    add_common(app.add_subcommand("flops", "estimate GFLOPs for a schedule"), flops_opts);

    ForwardOpts fwd;
    CLI::App* fwd_cmd = app.add_subcommand("forward", "run a synthetic video forward with a trace");
    add_common(fwd_cmd, fwd.common);
    fwd_cmd->add_option("--seed", fwd.seed, "weights/input seed");
    fwd_cmd->add_option("--threads", fwd.threads, "frame-stage worker threads")->check(CLI::PositiveNumber);
    fwd_cmd->add_option("--redundancy", fwd.redundancy, "temporal redundancy of the synthetic video");
    fwd_cmd->add_option("--weights", fwd.weights_path, "load backbone weights from a container file");
    fwd_cmd->add_option("--export-merge-map", fwd.merge_map_path, "write the final merge map JSON here");

    CommonOpts ablate_opts;
    add_common(app.add_subcommand("ablate", "token/GFLOPs table for the merging-strategy families"),
               ablate_opts, /*with_schedule=*/false);

    TrainOpts train;
    train.common.preset = "micro";
    CLI::App* train_cmd = app.add_subcommand("train", "toy contrastive training of LoRA + clip embeddings");
    add_common(train_cmd, train.common);
    train_cmd->add_option("--pairs", train.pairs, "synthetic text-video pairs")->check(CLI::PositiveNumber);
    train_cmd->add_option("--steps", train.steps, "training steps")->check(CLI::PositiveNumber);
    train_cmd->add_option("--seed", train.seed, "seed for weights/data/training");
    train_cmd->add_option("--lr", train.lr, "learning rate");
    train_cmd->add_option("--momentum", train.momentum, "SGD momentum");
    train_cmd->add_option("--redundancy", train.redundancy, "temporal redundancy of the synthetic videos");
    train_cmd->add_option("--log", train.log_path, "write the per-step JSONL log here");
    train_cmd->add_option("--save-state", train.state_out, "write trained LoRA + clip embeddings here");

    BenchOpts bench;
    bench.common.preset = "toy";
    CLI::App* bench_cmd = app.add_subcommand("bench", "wall-clock throughput vs the no-merge baseline");
    add_common(bench_cmd, bench.common);
    bench_cmd->add_option("--batch", bench.batch, "videos per repeat")->check(CLI::PositiveNumber);
    bench_cmd->add_option("--repeats", bench.repeats, "timed repeats (minimum 3)");
    bench_cmd->add_option("--seed", bench.seed, "input/weights seed");
    bench_cmd->add_option("--threads", bench.threads, "frame-stage worker threads")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand("tokens")) return cmd_tokens(tokens_opts);
        if (app.got_subcommand("flops")) return cmd_flops(flops_opts);
        if (app.got_subcommand("forward")) return cmd_forward(fwd);
        if (app.got_subcommand("ablate")) return cmd_ablate(ablate_opts);
        if (app.got_subcommand("train")) return cmd_train(train);
        if (app.got_subcommand("bench")) return cmd_bench(bench);
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ContractViolation& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 2;
}
