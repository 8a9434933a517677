#pragma once

#include "spiraldiff/core.hpp"
#include "spiraldiff/rng.hpp"
#include "spiraldiff/vocab.hpp"

#include <string>
#include <utility>
#include <vector>

namespace spiraldiff {

// Discrete <-> continuous bridge hyperparameters.
struct EmbeddingSpec {
    int d_x = 32;
    int d_c = 64;
    double sigma0 = 0.0;
    bool tied_rounding = true;

    void validate() const {
        if (d_x < 1 || d_c < 1) {
            throw ConfigError("EmbeddingSpec: embedding dimensions must be >= 1");
        }
        if (sigma0 < 0.0) {
            throw ConfigError("EmbeddingSpec: sigma0 must be >= 0");
        }
    }
};

namespace detail {
template <class S>
void check_ids(const std::vector<int>& ids, const Mat<S>& table) {
    for (int id : ids) {
        if (id < 0 || id >= table.rows()) {
            throw ShapeError("embedding: token id " + std::to_string(id) + " out of range for table with "
                             + std::to_string(table.rows()) + " rows");
        }
    }
}
}  // namespace detail

// x0 sample of the embedding step: Emb(w) + sigma0 * eps, row per position.
// sigma0 = 0 returns the exact embedding rows.
template <class S>
Mat<S> embed_target(const TokenSequence& w, const Mat<S>& table, double sigma0, Rng& rng) {
    detail::check_ids(w.ids, table);
    const int k = w.padded_len();
    const int d = static_cast<int>(table.cols());
    Mat<S> out(k, d);
    for (int i = 0; i < k; ++i) {
        out.row(i) = table.row(w.ids[static_cast<std::size_t>(i)]);
    }
    if (sigma0 > 0.0) {
        for (int i = 0; i < k; ++i) {
            for (int j = 0; j < d; ++j) {
                out(i, j) += static_cast<S>(sigma0 * rng.gaussian());
            }
        }
    }
    return out;
}

// Rounding step logits. Tied: logits = x0 * table^T. Untied callers pass the
// learned rounding head as `table`. Logits factorize per position; argmax
// ties break toward the lower token id (Eigen's maxCoeff picks the first
// maximal entry in scan order, which is exactly that).
template <class S>
std::pair<Mat<S>, std::vector<int>> round_to_tokens(const Mat<S>& x0, const Mat<S>& table) {
    if (x0.cols() != table.cols()) {
        throw ShapeError("round_to_tokens: hidden dims differ (" + std::to_string(x0.cols()) + " vs "
                         + std::to_string(table.cols()) + ")");
    }
    Mat<S> logits = x0 * table.transpose();
    std::vector<int> ids(static_cast<std::size_t>(x0.rows()));
    for (int i = 0; i < x0.rows(); ++i) {
        int best = 0;
        S best_val = logits(i, 0);
        for (int v = 1; v < logits.cols(); ++v) {
            if (logits(i, v) > best_val) {
                best_val = logits(i, v);
                best = v;
            }
        }
        ids[static_cast<std::size_t>(i)] = best;
    }
    return {std::move(logits), std::move(ids)};
}

// Sum over positions of log softmax(logits)[target]: log p(w | x0) for the
// factorized rounding distribution. 64-bit accumulation regardless of S.
template <class S>
double rounding_log_prob(const Mat<S>& logits, const std::vector<int>& targets) {
    if (static_cast<int>(targets.size()) != logits.rows()) {
        throw ShapeError("rounding_log_prob: one target id per row required");
    }
    double total = 0.0;
    for (int i = 0; i < logits.rows(); ++i) {
        const double m = static_cast<double>(logits.row(i).maxCoeff());
        double denom = 0.0;
        for (int v = 0; v < logits.cols(); ++v) {
            denom += std::exp(static_cast<double>(logits(i, v)) - m);
        }
        total += static_cast<double>(logits(i, targets[static_cast<std::size_t>(i)])) - m - std::log(denom);
    }
    return total;
}

// Snap each row of x0_hat to the nearest table row (Euclidean); ties break
// toward the lower id. Used by the sampler's clamping trick.
template <class S>
Mat<S> clamp_to_embeddings(const Mat<S>& x0_hat, const Mat<S>& table) {
    if (x0_hat.cols() != table.cols()) {
        throw ShapeError("clamp_to_embeddings: hidden dims differ");
    }
    Mat<S> out(x0_hat.rows(), x0_hat.cols());
    for (int i = 0; i < x0_hat.rows(); ++i) {
        int best = 0;
        S best_d2 = (table.row(0) - x0_hat.row(i)).squaredNorm();
        for (int v = 1; v < table.rows(); ++v) {
            const S d2 = (table.row(v) - x0_hat.row(i)).squaredNorm();
            if (d2 < best_d2) {
                best_d2 = d2;
                best = v;
            }
        }
        out.row(i) = table.row(best);
    }
    return out;
}

}  // namespace spiraldiff
