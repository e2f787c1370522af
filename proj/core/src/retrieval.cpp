#include "tokmerge/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace tokmerge {

SimilarityMatrix similarity_matrix(const std::vector<std::vector<float>>& text_embs,
                                   const std::vector<std::vector<float>>& video_embs, float tau) {
    require(!text_embs.empty() && text_embs.size() == video_embs.size(),
            "similarity_matrix: need equally many text and video embeddings");
    require(tau > 0.0f, "similarity_matrix: tau must be positive");
    const int b = static_cast<int>(text_embs.size());
    SimilarityMatrix sim;
    sim.tau = tau;
    sim.s = Mat(b, b);
    for (int i = 0; i < b; ++i) {
        for (int j = 0; j < b; ++j) {
            sim.s.at(i, j) = cosine_sim(text_embs[i], video_embs[j]);
        }
    }
    return sim;
}

namespace {

// log(sum_j exp(row[j]/tau)) with max subtraction, in float64.
double log_sum_exp_over(const Mat& s, double tau, int fixed, bool fixed_is_row) {
    const int b = s.rows;
    double mx = -1e300;
    for (int k = 0; k < b; ++k) {
        const double v = (fixed_is_row ? s.at(fixed, k) : s.at(k, fixed)) / tau;
        mx = std::max(mx, v);
    }
    double sum = 0.0;
    for (int k = 0; k < b; ++k) {
        const double v = (fixed_is_row ? s.at(fixed, k) : s.at(k, fixed)) / tau;
        sum += std::exp(v - mx);
    }
    return mx + std::log(sum);
}

}  // namespace

ContrastiveLoss contrastive_loss(const SimilarityMatrix& sim) {
    const int b = sim.s.rows;
    require(b >= 2 && sim.s.cols == b, "contrastive_loss: need a square matrix with B >= 2");
    require(sim.tau > 0.0f, "contrastive_loss: tau must be positive");
    const double tau = sim.tau;
    ContrastiveLoss loss;
    for (int i = 0; i < b; ++i) {
        const double diag = sim.s.at(i, i) / tau;
        loss.t2v += log_sum_exp_over(sim.s, tau, i, /*fixed_is_row=*/true) - diag;
        loss.v2t += log_sum_exp_over(sim.s, tau, i, /*fixed_is_row=*/false) - diag;
    }
    loss.t2v /= b;
    loss.v2t /= b;
    loss.total = 0.5 * (loss.t2v + loss.v2t);
    return loss;
}

Mat loss_grad(const SimilarityMatrix& sim) {
    const int b = sim.s.rows;
    require(b >= 2 && sim.s.cols == b, "loss_grad: need a square matrix with B >= 2");
    require(sim.tau > 0.0f, "loss_grad: tau must be positive");
    const double tau = sim.tau;
    Mat g(b, b);
    // Row softmax (text-to-video direction).
    for (int i = 0; i < b; ++i) {
        const double lse = log_sum_exp_over(sim.s, tau, i, true);
        for (int j = 0; j < b; ++j) {
            const double p = std::exp(sim.s.at(i, j) / tau - lse);
            g.at(i, j) += static_cast<float>((p - (i == j ? 1.0 : 0.0)) / (2.0 * b * tau));
        }
    }
    // Column softmax (video-to-text direction).
    for (int j = 0; j < b; ++j) {
        const double lse = log_sum_exp_over(sim.s, tau, j, false);
        for (int i = 0; i < b; ++i) {
            const double q = std::exp(sim.s.at(i, j) / tau - lse);
            g.at(i, j) += static_cast<float>((q - (i == j ? 1.0 : 0.0)) / (2.0 * b * tau));
        }
    }
    return g;
}

RetrievalMetrics retrieval_metrics(const SimilarityMatrix& sim, Direction dir) {
    const int b = sim.s.rows;
    require(b >= 1 && sim.s.cols == b, "retrieval_metrics: need a square matrix");
    RetrievalMetrics m;
    long rank_sum = 0;
    int hit1 = 0, hit5 = 0, hit10 = 0;
    for (int q = 0; q < b; ++q) {
        const float truth = dir == Direction::t2v ? sim.s.at(q, q) : sim.s.at(q, q);
        int ahead = 0;
        for (int j = 0; j < b; ++j) {
            if (j == q) continue;
            const float score = dir == Direction::t2v ? sim.s.at(q, j) : sim.s.at(j, q);
            if (score > truth || (score == truth && j < q)) ++ahead;
        }
        const int rank = 1 + ahead;
        rank_sum += rank;
        hit1 += rank <= 1;
        hit5 += rank <= 5;
        hit10 += rank <= 10;
    }
    m.r1 = 100.0 * hit1 / b;
    m.r5 = 100.0 * hit5 / b;
    m.r10 = 100.0 * hit10 / b;
    m.rsum = m.r1 + m.r5 + m.r10;
    m.mean_rank = static_cast<double>(rank_sum) / b;
    return m;
}

std::string RetrievalMetrics::to_json() const {
    nlohmann::json doc;
    doc["r1"] = r1;
    doc["r5"] = r5;
    doc["r10"] = r10;
    doc["rsum"] = rsum;
    doc["mean_rank"] = mean_rank;
    return doc.dump(2);
}

std::string TrainResult::log_jsonl() const {
    std::ostringstream os;
    for (const TrainStepRecord& rec : log) {
        nlohmann::json line;
        line["step"] = rec.step;
        line["loss"] = rec.loss;
        line["train_r1"] = rec.train_r1;
        os << line.dump() << "\n";
    }
    return os.str();
}

}  // namespace tokmerge
