#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tokmerge/numerics.hpp"

namespace tokmerge {

// Controls for the synthetic paired text-video generator. redundancy is the
// fraction of each frame token's energy shared with a per-video base pattern:
//   token = sqrt(rho) * base + sqrt(1 - rho) * per-frame noise
// so rho=1 duplicates frames exactly and rho=0 decorrelates them.
struct SynthSpec {
    int num_pairs = 8;
    int frame_count = 4;
    int tokens_per_frame = 5;
    int width = 16;
    double redundancy = 0.7;  // rho in [0, 1]
    int subject_count = 2;    // latent subjects per video, contiguous patch blocks
    int subject_pool = 16;    // global subject vocabulary
    uint64_t seed = 0;

    void validate() const;
};

struct SynthPair {
    int pair_id = 0;
    std::vector<int> text_ids;     // subject tokens followed by the EOS id
    std::vector<int> subjects;     // latent subject indices, for inspection
    std::vector<Mat> frames;       // frame_count mats of tokens_per_frame x width
};

struct SynthDataset {
    SynthSpec spec;
    std::vector<SynthPair> pairs;
};

// Text ids use: 0 = padding (unused), 1 = EOS, subject s -> token id 2 + s.
constexpr int kTextEos = 1;
constexpr int kTextSubjectBase = 2;

SynthDataset generate(const SynthSpec& spec);

void save_dataset(const std::string& path, const SynthDataset& data);
SynthDataset load_dataset(const std::string& path);

}  // namespace tokmerge
