#pragma once

#include "spiraldiff/core.hpp"
#include "spiraldiff/metrics.hpp"
#include "spiraldiff/nnet.hpp"
#include "spiraldiff/rng.hpp"
#include "spiraldiff/schedule.hpp"
#include "spiraldiff/textspace.hpp"
#include "spiraldiff/vocab.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <thread>
#include <vector>

namespace spiraldiff {

// Per-candidate reverse-process state. t decreases monotonically; x0_prev
// carries the previous step's raw x0 estimate for self-conditioning.
template <class S>
struct DenoiseState {
    Mat<S> x_t;
    Mat<S> x0_prev;
    int t = 0;
};

struct MbrConfig {
    enum class Metric { Bleu };
    int candidates = 10;
    Metric metric = Metric::Bleu;

    void validate() const {
        if (candidates < 1) {
            throw ConfigError("MbrConfig: candidate count must be >= 1");
        }
    }
};

// One reverse transition: predict x0, optionally clamp it onto the embedding
// table for the posterior, sample x_{t-1} (deterministic at t = 1), and carry
// the pre-clamp estimate forward for self-conditioning.
template <class S, class ModelT = DenoiseModel<S>>
DenoiseState<S> reverse_step(const ModelT& model, const NoiseSchedule& sched,
                             const DenoiseState<S>& state, const TokenSequence& wc, bool clamp,
                             Rng& rng,
                             const typename ModelT::EncoderCache* cache = nullptr) {
    if (state.t < 1 || state.t > sched.T) {
        throw ShapeError("reverse_step: state.t outside [1, T]");
    }
    const Mat<S> x0_hat = model.denoise(state.x_t, state.x0_prev, wc, state.t, cache);
    const Mat<S>* x0_for_posterior = &x0_hat;
    Mat<S> snapped;
    if (clamp) {
        snapped = clamp_to_embeddings(x0_hat, model.target_embedding());
        x0_for_posterior = &snapped;
    }
    auto [mean, var] = posterior_mean_var(sched, state.x_t, *x0_for_posterior, state.t);
    DenoiseState<S> next;
    if (state.t > 1) {
        const S std_dev = static_cast<S>(std::sqrt(var));
        Mat<S> eps(mean.rows(), mean.cols());
        for (int i = 0; i < eps.rows(); ++i) {
            for (int j = 0; j < eps.cols(); ++j) {
                eps(i, j) = static_cast<S>(rng.gaussian());
            }
        }
        next.x_t = mean + std_dev * eps;
    } else {
        next.x_t = std::move(mean);
    }
    next.x0_prev = x0_hat;
    next.t = state.t - 1;
    return next;
}

struct Candidate {
    std::vector<int> ids;  // content tokens: eos stripped, pads dropped
    std::string text;
};

struct GenerateResult {
    int selected = 0;
    std::vector<Candidate> candidates;
};

template <class S>
struct GenerateOptions {
    bool clamp = true;
    int threads = 0;  // 0 = auto; candidate results merge in index order regardless
    // Test instrumentation: called after every reverse step (forces the
    // sequential path when set).
    std::function<void(int candidate, const DenoiseState<S>& after)> observer;
};

namespace detail {

template <class ModelT, class S = typename ModelT::scalar_type>
Candidate run_candidate(const ModelT& model, const NoiseSchedule& sched,
                        const Vocabulary& vocab, const TokenSequence& wc, std::uint64_t seed,
                        int candidate_index, const GenerateOptions<S>& opt) {
    const ModelConfig& cfg = model.config();
    Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(candidate_index));

    typename ModelT::EncoderCache cache;
    const typename ModelT::EncoderCache* cache_ptr = nullptr;
    if (cfg.arch == Arch::DiffuED) {
        cache = model.encode_condition(wc);
        cache_ptr = &cache;
    }

    DenoiseState<S> state;
    state.x_t = Mat<S>(cfg.k_x, cfg.d_x);
    for (int i = 0; i < cfg.k_x; ++i) {
        for (int j = 0; j < cfg.d_x; ++j) {
            state.x_t(i, j) = static_cast<S>(rng.gaussian());
        }
    }
    state.x0_prev = Mat<S>::Zero(cfg.k_x, cfg.d_x);
    state.t = cfg.T;
    while (state.t >= 1) {
        state = reverse_step(model, sched, state, wc, opt.clamp, rng, cache_ptr);
        if (opt.observer) {
            opt.observer(candidate_index, state);
        }
    }

    auto [logits, ids] = round_to_tokens(state.x_t, model.rounding_table());
    (void)logits;
    Candidate cand;
    for (int id : ids) {
        if (id == Vocabulary::kEosId) {
            break;
        }
        if (id == Vocabulary::kPadId) {
            continue;
        }
        cand.ids.push_back(id);
    }
    cand.text = detokenize(cand.ids, vocab);
    return cand;
}

}  // namespace detail

// MBR selection: the candidate with the highest total similarity to the
// others wins; ties break toward the lower index. With one candidate this is
// the identity.
template <class Tok>
int mbr_select(const std::vector<std::vector<Tok>>& candidates,
               MbrConfig::Metric metric = MbrConfig::Metric::Bleu) {
    (void)metric;  // bleu is the only metric
    if (candidates.empty()) {
        throw ShapeError("mbr_select: empty candidate list");
    }
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < candidates.size(); ++s) {
        double score = 0.0;
        for (std::size_t o = 0; o < candidates.size(); ++o) {
            if (o == s) {
                continue;
            }
            score += bleu(candidates[s], candidates[o]);
        }
        if (score > best_score) {
            best_score = score;
            best = static_cast<int>(s);
        }
    }
    return best;
}

// Draws mbr.candidates independent reverse trajectories (substreams keyed by
// candidate index) and MBR-selects among them. Candidates are embarrassingly
// parallel; results always merge in candidate order, so the output depends
// only on the seed.
template <class ModelT, class S = typename ModelT::scalar_type>
GenerateResult generate(const ModelT& model, const NoiseSchedule& sched,
                        const Vocabulary& vocab, const TokenSequence& wc, const MbrConfig& mbr,
                        std::uint64_t seed, const GenerateOptions<S>& opt = {}) {
    mbr.validate();
    GenerateResult result;
    result.candidates.resize(static_cast<std::size_t>(mbr.candidates));

    int threads = opt.threads;
    if (threads <= 0) {
        threads = static_cast<int>(std::thread::hardware_concurrency());
    }
    threads = std::max(1, std::min(threads, mbr.candidates));
    if (opt.observer) {
        threads = 1;
    }

    if (threads == 1) {
        for (int ci = 0; ci < mbr.candidates; ++ci) {
            result.candidates[static_cast<std::size_t>(ci)] =
                detail::run_candidate(model, sched, vocab, wc, seed, ci, opt);
        }
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(threads));
        for (int w = 0; w < threads; ++w) {
            pool.emplace_back([&, w]() {
                for (int ci = w; ci < mbr.candidates; ci += threads) {
                    result.candidates[static_cast<std::size_t>(ci)] =
                        detail::run_candidate(model, sched, vocab, wc, seed, ci, opt);
                }
            });
        }
        for (auto& th : pool) {
            th.join();
        }
    }

    std::vector<std::vector<int>> id_lists;
    id_lists.reserve(result.candidates.size());
    for (const auto& c : result.candidates) {
        id_lists.push_back(c.ids);
    }
    result.selected = mbr_select(id_lists);
    return result;
}

}  // namespace spiraldiff
