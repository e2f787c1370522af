#include "tokmerge/schedule.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"

namespace tokmerge {

int MergeSchedule::group_size(size_t k) const {
    require(k < steps.size(), "group_size: step index out of range");
    const int before = k == 0 ? frame_count : steps[k - 1].clip_count;
    return before / steps[k].clip_count;
}

void MergeSchedule::validate() const {
    require(frame_count >= 1, "schedule: frame count must be >= 1");
    require(img_r >= 0, "schedule: r must be >= 0");
    require(keep_cross > 0.0 && keep_cross <= 1.0, "schedule: Rc must be in (0, 1]");
    require(keep_intra > 0.0 && keep_intra <= 1.0, "schedule: Ri must be in (0, 1]");
    int prev_layer = 0;
    int prev_count = frame_count;
    for (const MergeStep& s : steps) {
        require(s.layer > prev_layer, "schedule: step layers must be strictly increasing");
        require(s.clip_count >= 1, "schedule: clip count must be >= 1");
        require(s.clip_count < prev_count, "schedule: clip count must strictly decrease");
        require(prev_count % s.clip_count == 0, "schedule: clip count must divide the previous count");
        prev_layer = s.layer;
        prev_count = s.clip_count;
    }
    require(start_clip >= 1, "schedule: start must be >= 1");
    if (!steps.empty()) {
        require(start_clip <= steps.front().layer, "schedule: start must be in [1, first step layer]");
    }
}

void MergeSchedule::validate_against(const ModelConfig& cfg) const {
    validate();
    require(frame_count == cfg.frame_count,
            "schedule frame count " + std::to_string(frame_count) + " != config frame count " +
                std::to_string(cfg.frame_count));
    for (const MergeStep& s : steps) {
        require(s.layer <= cfg.num_layers, "schedule: step layer beyond the last layer");
    }
    const int image_layers = std::min(start_clip, cfg.num_layers + 1) - 1;
    require(static_cast<long>(img_r) * image_layers < cfg.tokens_per_frame,
            "schedule: r * image-merge layers would exhaust the frame tokens");
}

std::string MergeSchedule::to_string() const {
    std::ostringstream os;
    os << frame_count;
    for (const MergeStep& s : steps) os << '@' << s.layer << ':' << s.clip_count;
    os << " r=" << img_r << " Rc=" << keep_cross << " Ri=" << keep_intra;
    if (!steps.empty() && start_clip != steps.front().layer) os << " start=" << start_clip;
    if (!gap_intra) os << " gap=0";
    if (!tail_intra) os << " tail=0";
    return os.str();
}

namespace {

struct Scanner {
    const std::string& text;
    size_t pos = 0;

    bool done() const { return pos >= text.size(); }
    char peek() const { return done() ? '\0' : text[pos]; }

    int read_int(const char* what) {
        const size_t start = pos;
        long v = 0;
        while (!done() && std::isdigit(static_cast<unsigned char>(text[pos]))) {
            v = v * 10 + (text[pos] - '0');
            if (v > 1'000'000'000L) throw ScheduleParseError(std::string(what) + " out of range", start);
            ++pos;
        }
        if (pos == start) throw ScheduleParseError(std::string("expected ") + what, start);
        return static_cast<int>(v);
    }

    double read_float(const char* what) {
        const size_t start = pos;
        size_t consumed = 0;
        double v = 0.0;
        try {
            v = std::stod(text.substr(start), &consumed);
        } catch (const std::exception&) {
            throw ScheduleParseError(std::string("expected ") + what, start);
        }
        pos = start + consumed;
        return v;
    }

    void skip_space() {
        while (!done() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    }
};

}  // namespace

MergeSchedule parse_schedule(const std::string& text) {
    MergeSchedule s;
    Scanner sc{text};
    sc.skip_space();
    s.frame_count = sc.read_int("frame count");
    while (sc.peek() == '@') {
        ++sc.pos;
        MergeStep step;
        const size_t at = sc.pos;
        step.layer = sc.read_int("layer index");
        if (sc.peek() != ':') throw ScheduleParseError("expected ':' after layer index", sc.pos);
        ++sc.pos;
        step.clip_count = sc.read_int("clip count");
        const int prev = s.steps.empty() ? s.frame_count : s.steps.back().clip_count;
        if (step.clip_count >= prev)
            throw ScheduleParseError("clip count must strictly decrease", at);
        if (step.clip_count < 1 || prev % step.clip_count != 0)
            throw ScheduleParseError(std::to_string(step.clip_count) + " does not divide " + std::to_string(prev), at);
        if (!s.steps.empty() && step.layer <= s.steps.back().layer)
            throw ScheduleParseError("step layers must be strictly increasing", at);
        s.steps.push_back(step);
    }
    s.start_clip = s.steps.empty() ? MergeSchedule::kNoClipStage : s.steps.front().layer;

    bool start_given = false;
    while (true) {
        sc.skip_space();
        if (sc.done()) break;
        const size_t key_start = sc.pos;
        std::string key;
        while (!sc.done() && text[sc.pos] != '=' && !std::isspace(static_cast<unsigned char>(text[sc.pos]))) {
            key += text[sc.pos++];
        }
        if (sc.peek() != '=') throw ScheduleParseError("expected '=' after option '" + key + "'", sc.pos);
        ++sc.pos;
        if (key == "r") {
            s.img_r = sc.read_int("r value");
        } else if (key == "Rc") {
            s.keep_cross = sc.read_float("Rc value");
            if (s.keep_cross <= 0.0 || s.keep_cross > 1.0)
                throw ScheduleParseError("Rc must be in (0, 1]", key_start);
        } else if (key == "Ri") {
            s.keep_intra = sc.read_float("Ri value");
            if (s.keep_intra <= 0.0 || s.keep_intra > 1.0)
                throw ScheduleParseError("Ri must be in (0, 1]", key_start);
        } else if (key == "start") {
            s.start_clip = sc.read_int("start value");
            start_given = true;
        } else if (key == "tail") {
            s.tail_intra = sc.read_int("tail value") != 0;
        } else if (key == "gap") {
            s.gap_intra = sc.read_int("gap value") != 0;
        } else {
            throw ScheduleParseError("unknown option '" + key + "'", key_start);
        }
    }
    if (start_given && !s.steps.empty() && (s.start_clip < 1 || s.start_clip > s.steps.front().layer))
        throw ScheduleParseError("start must be in [1, first step layer]", 0);
    s.validate();
    return s;
}

// kept = ceil(n * keep): the convention that reproduces the published
// final counts (97 / 127 / 500) and the layer-11 capacity of 118. The 1e-9
// slack keeps products like 10 * 0.9 from landing a hair above the integer
// and ceiling one token too high.
int kept_token_count(int n, double keep) {
    return static_cast<int>(std::ceil(static_cast<double>(n) * keep - 1e-9));
}

TokenCountReport predict_token_counts(const ModelConfig& cfg, const MergeSchedule& sched) {
    cfg.validate();
    sched.validate_against(cfg);

    TokenCountReport rep;
    rep.layers.reserve(cfg.num_layers);

    int per_clip = cfg.tokens_per_frame;
    int clips = cfg.frame_count;
    size_t next_step = 0;

    for (int layer = 1; layer <= cfg.num_layers; ++layer) {
        LayerCounts lc;
        lc.layer = layer;
        if (layer < sched.start_clip) {
            lc.kind = LayerKind::image_merge;
            lc.clip_count = clips;
            lc.tokens_after_cross = per_clip;
            const int after = per_clip - sched.img_r;
            // CLS sits at slot 0 of each frame (an even position, so in set A):
            // eligible sources per frame = ceil(n/2) - 1.
            if (sched.img_r > (per_clip + 1) / 2 - 1)
                throw InfeasibleSchedule("layer " + std::to_string(layer) + ": r=" + std::to_string(sched.img_r) +
                                         " exceeds the eligible source tokens per frame");
            if (cfg.protect_cls && after <= 1)
                throw InfeasibleSchedule("layer " + std::to_string(layer) + ": frame would shrink to its CLS token");
            lc.tokens_after_intra = after;
            per_clip = after;
        } else {
            const bool is_step = next_step < sched.steps.size() && sched.steps[next_step].layer == layer;
            const int cls_floor = [&] {
                const int c = is_step ? sched.steps[next_step].clip_count : clips;
                return cfg.protect_cls ? cfg.frame_count / c : 0;
            }();
            if (is_step) {
                lc.kind = LayerKind::clip_step;
                lc.group_size = sched.group_size(next_step);
                clips = sched.steps[next_step].clip_count;
                const int concat = lc.group_size * per_clip;
                per_clip = kept_token_count(concat, sched.keep_cross);
                if (per_clip <= cls_floor)
                    throw InfeasibleSchedule("layer " + std::to_string(layer) +
                                             ": cross-merge keeps no more than the protected CLS tokens");
                ++next_step;
            } else {
                lc.kind = LayerKind::clip_pass;
            }
            lc.clip_count = clips;
            lc.tokens_after_cross = per_clip;
            const bool in_gap = next_step < sched.steps.size();
            const bool intra_on = is_step || (in_gap ? sched.gap_intra : sched.tail_intra);
            if (intra_on) {
                per_clip = kept_token_count(per_clip, sched.keep_intra);
                if (per_clip <= cls_floor)
                    throw InfeasibleSchedule("layer " + std::to_string(layer) +
                                             ": intra-merge keeps no more than the protected CLS tokens");
            }
            lc.tokens_after_intra = per_clip;
        }
        lc.attention_capacity = lc.tokens_after_cross;
        if (lc.attention_capacity > rep.max_attention_capacity) {
            rep.max_attention_capacity = lc.attention_capacity;
            rep.max_attention_layer = layer;
        }
        rep.layers.push_back(lc);
    }

    rep.final_clip_count = clips;
    rep.final_tokens_per_clip = per_clip;
    rep.final_token_count = static_cast<long>(clips) * per_clip;
    rep.final_fraction = static_cast<double>(rep.final_token_count) /
                         (static_cast<double>(cfg.frame_count) * cfg.tokens_per_frame);
    return rep;
}

std::string TokenCountReport::to_table() const {
    std::ostringstream os;
    os << "layer  kind   clips  group   attn    ffn\n";
    char buf[96];
    for (const LayerCounts& lc : layers) {
        const char* kind = lc.kind == LayerKind::image_merge ? "image"
                           : lc.kind == LayerKind::clip_step ? "step"
                                                             : "pass";
        std::snprintf(buf, sizeof(buf), "%5d  %-5s  %5d  %5d  %5d  %5d\n", lc.layer, kind, lc.clip_count,
                      lc.group_size, lc.tokens_after_cross, lc.tokens_after_intra);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "final: %d x %d (%.1f%% of input tokens)\n", final_clip_count,
                  final_tokens_per_clip, 100.0 * final_fraction);
    os << buf;
    std::snprintf(buf, sizeof(buf), "attention capacity: %d (layer %d)\n", max_attention_capacity,
                  max_attention_layer);
    os << buf;
    return os.str();
}

std::string TokenCountReport::to_json() const {
    nlohmann::json doc;
    nlohmann::json layers_json = nlohmann::json::array();
    for (const LayerCounts& lc : layers) {
        layers_json.push_back({
            {"layer", lc.layer},
            {"kind", lc.kind == LayerKind::image_merge ? "image"
                     : lc.kind == LayerKind::clip_step ? "step"
                                                       : "pass"},
            {"clip_count", lc.clip_count},
            {"group_size", lc.group_size},
            {"tokens_after_cross", lc.tokens_after_cross},
            {"tokens_after_intra", lc.tokens_after_intra},
            {"attention_capacity", lc.attention_capacity},
        });
    }
    doc["layers"] = std::move(layers_json);
    doc["final_clip_count"] = final_clip_count;
    doc["final_tokens_per_clip"] = final_tokens_per_clip;
    doc["final_token_count"] = final_token_count;
    doc["final_fraction"] = final_fraction;
    doc["max_attention_capacity"] = max_attention_capacity;
    doc["max_attention_layer"] = max_attention_layer;
    return doc.dump(2);
}

}  // namespace tokmerge
