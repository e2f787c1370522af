#pragma once

#include <cstdint>
#include <vector>

#include "tokmerge/errors.hpp"

namespace tokmerge {

// Dense row-major float32 matrix. All forward-path math is float32; a few
// kernels use float64 accumulators inside reductions (noted per kernel).
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;  // rows * cols, row-major

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0f) {}
    Mat(int r, int c, std::vector<float> d) : rows(r), cols(c), data(std::move(d)) {
        require(data.size() == static_cast<size_t>(r) * static_cast<size_t>(c), "Mat: data length != rows*cols");
    }

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    float* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const float* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    size_t size() const { return data.size(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// a (m×k) times b (k×n). Fixed i-k-j loop order, float32 accumulation into the
// output row; no reduction reordering, so results are bit-stable across runs.
Mat matmul(const Mat& a, const Mat& b);

Mat transpose(const Mat& m);

Mat add(const Mat& a, const Mat& b);
Mat sub(const Mat& a, const Mat& b);
Mat scale(const Mat& m, float s);
void add_inplace(Mat& a, const Mat& b);
// Adds `row` (length m.cols) to every row of m.
void add_row_broadcast_inplace(Mat& m, const float* row);

// Row-wise softmax with per-row max subtraction; float64 row sums.
Mat softmax_rows(const Mat& m);

// Per-row standardization (float64 mean/variance accumulation) followed by
// the affine map gamma*x + beta. gamma/beta length must equal m.cols.
Mat layer_norm(const Mat& m, const std::vector<float>& gamma, const std::vector<float>& beta, float eps = 1e-5f);

// tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
// The exact-erf variant is intentionally not provided.
Mat gelu(const Mat& m);
float gelu_scalar(float x);

// Cosine similarity with float64 accumulation of the three dot products.
// Both vectors must have a nonzero norm.
float cosine_sim(const float* u, const float* v, int n);
float cosine_sim(const std::vector<float>& u, const std::vector<float>& v);

bool all_finite(const Mat& m);
double l2_norm(const float* v, int n);

Mat slice_cols(const Mat& m, int c0, int c1);
void paste_cols(Mat& dst, const Mat& src, int c0);

// Deterministic seeded generator: a splitmix64 stream (Steele et al., the
// java.util.SplittableRandom mixer). Gaussians come from Box-Muller over two
// splitmix64 uniforms, so identical seeds give identical streams on every
// platform; no std::*_distribution is used anywhere.
class Rng {
 public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    // (0, 1]
    double uniform_open0() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    float normal(float mean = 0.0f, float stddev = 1.0f);

    // Uniform integer in [lo, hi), hi > lo.
    int uniform_int(int lo, int hi);

    Mat gaussian(int rows, int cols, float stddev);

 private:
    uint64_t state_;
};

}  // namespace tokmerge
