#include "tokmerge/synthgen.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "tokmerge/weights_io.hpp"

namespace tokmerge {

void SynthSpec::validate() const {
    require(num_pairs >= 1, "synthgen: num_pairs must be >= 1");
    require(frame_count >= 1, "synthgen: frame_count must be >= 1");
    require(tokens_per_frame >= 2, "synthgen: tokens_per_frame must be >= 2");
    require(width >= 2, "synthgen: width must be >= 2");
    require(redundancy >= 0.0 && redundancy <= 1.0, "synthgen: redundancy must be in [0, 1]");
    require(subject_count >= 1 && subject_count <= tokens_per_frame - 1,
            "synthgen: subject_count must fit the patch slots");
    require(subject_pool >= subject_count, "synthgen: subject_pool smaller than subject_count");
}

namespace {

std::vector<float> unit_gaussian(Rng& rng, int width) {
    std::vector<float> v(width);
    for (float& x : v) x = rng.normal();
    const double n = l2_norm(v.data(), width);
    for (float& x : v) x = static_cast<float>(x / n);
    return v;
}

}  // namespace

SynthDataset generate(const SynthSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);

    // Global subject vocabulary, drawn once.
    std::vector<std::vector<float>> pool(spec.subject_pool);
    for (auto& u : pool) u = unit_gaussian(rng, spec.width);

    const int patches = spec.tokens_per_frame - 1;
    const float w_base = static_cast<float>(std::sqrt(spec.redundancy));
    const float w_noise = static_cast<float>(std::sqrt(1.0 - spec.redundancy));

    SynthDataset data;
    data.spec = spec;
    data.pairs.reserve(spec.num_pairs);
    for (int p = 0; p < spec.num_pairs; ++p) {
        SynthPair pair;
        pair.pair_id = p;
        while (static_cast<int>(pair.subjects.size()) < spec.subject_count) {
            const int s = rng.uniform_int(0, spec.subject_pool);
            if (std::find(pair.subjects.begin(), pair.subjects.end(), s) == pair.subjects.end()) {
                pair.subjects.push_back(s);
            }
        }
        for (int s : pair.subjects) pair.text_ids.push_back(kTextSubjectBase + s);
        pair.text_ids.push_back(kTextEos);

        // Per-video base pattern: CLS gets its own latent, patch slots share
        // their subject's latent in contiguous blocks.
        const std::vector<float> cls_base = unit_gaussian(rng, spec.width);
        std::vector<const float*> slot_base(spec.tokens_per_frame);
        slot_base[0] = cls_base.data();
        for (int slot = 1; slot < spec.tokens_per_frame; ++slot) {
            const int block = std::min((slot - 1) * spec.subject_count / patches, spec.subject_count - 1);
            slot_base[slot] = pool[pair.subjects[block]].data();
        }

        pair.frames.reserve(spec.frame_count);
        for (int f = 0; f < spec.frame_count; ++f) {
            Mat frame(spec.tokens_per_frame, spec.width);
            for (int slot = 0; slot < spec.tokens_per_frame; ++slot) {
                const std::vector<float> noise = unit_gaussian(rng, spec.width);
                float* row = frame.row(slot);
                for (int j = 0; j < spec.width; ++j) {
                    row[j] = w_base * slot_base[slot][j] + w_noise * noise[j];
                }
            }
            pair.frames.push_back(std::move(frame));
        }
        data.pairs.push_back(std::move(pair));
    }
    return data;
}

void save_dataset(const std::string& path, const SynthDataset& data) {
    TensorContainer c;
    c.format = "tokmerge.dataset";
    nlohmann::json meta;
    meta["num_pairs"] = data.spec.num_pairs;
    meta["frame_count"] = data.spec.frame_count;
    meta["tokens_per_frame"] = data.spec.tokens_per_frame;
    meta["width"] = data.spec.width;
    meta["redundancy"] = data.spec.redundancy;
    meta["subject_count"] = data.spec.subject_count;
    meta["subject_pool"] = data.spec.subject_pool;
    meta["seed"] = data.spec.seed;
    nlohmann::json pairs = nlohmann::json::array();
    for (const SynthPair& p : data.pairs) {
        pairs.push_back({{"pair_id", p.pair_id}, {"text_ids", p.text_ids}, {"subjects", p.subjects}});
    }
    meta["pairs"] = std::move(pairs);
    c.meta_json = meta.dump();

    for (const SynthPair& p : data.pairs) {
        Mat flat(data.spec.frame_count * data.spec.tokens_per_frame, data.spec.width);
        int row = 0;
        for (const Mat& f : p.frames) {
            std::copy(f.data.begin(), f.data.end(), flat.row(row));
            row += f.rows;
        }
        c.add("pair" + std::to_string(p.pair_id) + ".tokens", std::move(flat));
    }
    save_container(path, c);
}

SynthDataset load_dataset(const std::string& path) {
    const TensorContainer c = load_container(path, "tokmerge.dataset");
    const nlohmann::json meta = nlohmann::json::parse(c.meta_json);
    SynthDataset data;
    data.spec.num_pairs = meta.at("num_pairs").get<int>();
    data.spec.frame_count = meta.at("frame_count").get<int>();
    data.spec.tokens_per_frame = meta.at("tokens_per_frame").get<int>();
    data.spec.width = meta.at("width").get<int>();
    data.spec.redundancy = meta.at("redundancy").get<double>();
    data.spec.subject_count = meta.at("subject_count").get<int>();
    data.spec.subject_pool = meta.at("subject_pool").get<int>();
    data.spec.seed = meta.at("seed").get<uint64_t>();
    for (const auto& pj : meta.at("pairs")) {
        SynthPair p;
        p.pair_id = pj.at("pair_id").get<int>();
        p.text_ids = pj.at("text_ids").get<std::vector<int>>();
        p.subjects = pj.at("subjects").get<std::vector<int>>();
        const Mat& flat = c.get("pair" + std::to_string(p.pair_id) + ".tokens");
        const int n = data.spec.tokens_per_frame;
        for (int f = 0; f < data.spec.frame_count; ++f) {
            Mat frame(n, data.spec.width);
            std::copy(flat.row(f * n), flat.row(f * n) + static_cast<size_t>(n) * data.spec.width,
                      frame.data.begin());
            p.frames.push_back(std::move(frame));
        }
        data.pairs.push_back(std::move(p));
    }
    return data;
}

}  // namespace tokmerge
