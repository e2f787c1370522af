#include "tokmerge/numerics.hpp"

#include <cmath>

namespace tokmerge {

Mat matmul(const Mat& a, const Mat& b) {
    require(a.cols == b.rows, "matmul: a.cols != b.rows");
    Mat out(a.rows, b.cols);
    // 64-bit accumulators inside the k-reduction; fixed i-k-j order. This
    // keeps algebraically equivalent routes (e.g. folded vs separate low-rank
    // deltas) within a few float32 ulps of each other.
    std::vector<double> acc(b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const float* arow = a.row(i);
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const float* brow = b.row(k);
            for (int j = 0; j < b.cols; ++j) {
                acc[j] += aik * brow[j];
            }
        }
        float* orow = out.row(i);
        for (int j = 0; j < b.cols; ++j) orow[j] = static_cast<float>(acc[j]);
    }
    return out;
}

Mat transpose(const Mat& m) {
    Mat out(m.cols, m.rows);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) out.at(j, i) = m.at(i, j);
    return out;
}

Mat add(const Mat& a, const Mat& b) {
    require(a.same_shape(b), "add: shape mismatch");
    Mat out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

Mat sub(const Mat& a, const Mat& b) {
    require(a.same_shape(b), "sub: shape mismatch");
    Mat out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

Mat scale(const Mat& m, float s) {
    Mat out = m;
    for (float& v : out.data) v *= s;
    return out;
}

void add_inplace(Mat& a, const Mat& b) {
    require(a.same_shape(b), "add_inplace: shape mismatch");
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

void add_row_broadcast_inplace(Mat& m, const float* row) {
    for (int i = 0; i < m.rows; ++i) {
        float* r = m.row(i);
        for (int j = 0; j < m.cols; ++j) r[j] += row[j];
    }
}

Mat softmax_rows(const Mat& m) {
    Mat out(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i) {
        const float* src = m.row(i);
        float* dst = out.row(i);
        float mx = src[0];
        for (int j = 1; j < m.cols; ++j) mx = std::max(mx, src[j]);
        double sum = 0.0;  // 64-bit reduction
        for (int j = 0; j < m.cols; ++j) {
            dst[j] = std::exp(src[j] - mx);
            sum += dst[j];
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (int j = 0; j < m.cols; ++j) dst[j] *= inv;
    }
    return out;
}

Mat layer_norm(const Mat& m, const std::vector<float>& gamma, const std::vector<float>& beta, float eps) {
    require(static_cast<int>(gamma.size()) == m.cols && static_cast<int>(beta.size()) == m.cols,
            "layer_norm: gamma/beta length != cols");
    Mat out(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i) {
        const float* src = m.row(i);
        double mean = 0.0;  // 64-bit reductions for mean and variance
        for (int j = 0; j < m.cols; ++j) mean += src[j];
        mean /= m.cols;
        double var = 0.0;
        for (int j = 0; j < m.cols; ++j) {
            const double d = src[j] - mean;
            var += d * d;
        }
        var /= m.cols;
        const float inv = static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        float* dst = out.row(i);
        for (int j = 0; j < m.cols; ++j) {
            dst[j] = (src[j] - static_cast<float>(mean)) * inv * gamma[j] + beta[j];
        }
    }
    return out;
}

float gelu_scalar(float x) {
    const float c = 0.7978845608028654f;  // sqrt(2/pi)
    const float inner = c * (x + 0.044715f * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(inner));
}

Mat gelu(const Mat& m) {
    Mat out = m;
    for (float& v : out.data) v = gelu_scalar(v);
    return out;
}

float cosine_sim(const float* u, const float* v, int n) {
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (int i = 0; i < n; ++i) {
        dot += static_cast<double>(u[i]) * v[i];
        nu += static_cast<double>(u[i]) * u[i];
        nv += static_cast<double>(v[i]) * v[i];
    }
    require(nu > 0.0 && nv > 0.0, "cosine_sim: zero-norm vector");
    return static_cast<float>(dot / (std::sqrt(nu) * std::sqrt(nv)));
}

float cosine_sim(const std::vector<float>& u, const std::vector<float>& v) {
    require(u.size() == v.size(), "cosine_sim: length mismatch");
    return cosine_sim(u.data(), v.data(), static_cast<int>(u.size()));
}

bool all_finite(const Mat& m) {
    for (float v : m.data)
        if (!std::isfinite(v)) return false;
    return true;
}

double l2_norm(const float* v, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += static_cast<double>(v[i]) * v[i];
    return std::sqrt(s);
}

Mat slice_cols(const Mat& m, int c0, int c1) {
    Mat out(m.rows, c1 - c0);
    for (int i = 0; i < m.rows; ++i) {
        const float* src = m.row(i);
        float* dst = out.row(i);
        for (int j = c0; j < c1; ++j) *dst++ = src[j];
    }
    return out;
}

void paste_cols(Mat& dst, const Mat& src, int c0) {
    for (int i = 0; i < src.rows; ++i) {
        const float* s = src.row(i);
        float* d = dst.row(i) + c0;
        for (int j = 0; j < src.cols; ++j) d[j] = s[j];
    }
}

float Rng::normal(float mean, float stddev) {
    // Box-Muller; two uniforms per draw, no cached spare.
    const double u1 = uniform_open0();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * static_cast<float>(r * std::cos(2.0 * 3.14159265358979323846 * u2));
}

int Rng::uniform_int(int lo, int hi) {
    require(hi > lo, "uniform_int: empty range");
    const uint64_t span = static_cast<uint64_t>(hi - lo);
    return lo + static_cast<int>(next_u64() % span);
}

Mat Rng::gaussian(int rows, int cols, float stddev) {
    Mat out(rows, cols);
    for (float& v : out.data) v = normal(0.0f, stddev);
    return out;
}

}  // namespace tokmerge
