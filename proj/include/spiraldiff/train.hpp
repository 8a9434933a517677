#pragma once

#include "spiraldiff/autograd.hpp"
#include "spiraldiff/core.hpp"
#include "spiraldiff/nnet.hpp"
#include "spiraldiff/params.hpp"
#include "spiraldiff/rng.hpp"
#include "spiraldiff/schedule.hpp"
#include "spiraldiff/selfcond.hpp"
#include "spiraldiff/textspace.hpp"
#include "spiraldiff/vocab.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace spiraldiff {

class TrainDivergence : public std::runtime_error {
  public:
    explicit TrainDivergence(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Loss-aware timestep sampler
// ---------------------------------------------------------------------------

// Per-timestep ring buffers of the last H squared losses. Until every t has
// H records, sampling is uniform with weight 1; afterwards
// p(t) ~ sqrt(mean(L_t^2)) mixed with a 1e-3 uniform floor, and the
// importance weight is 1/(T * p(t)).
class LossHistory {
  public:
    LossHistory(int T, int H = 10) : T_(T), H_(H), buf_(static_cast<std::size_t>(T)),
                                     pos_(static_cast<std::size_t>(T), 0),
                                     count_(static_cast<std::size_t>(T), 0) {
        if (T < 1 || H < 1) {
            throw ConfigError("LossHistory: T and H must be positive");
        }
        for (auto& b : buf_) {
            b.assign(static_cast<std::size_t>(H), 0.0);
        }
    }

    int T() const { return T_; }
    int capacity() const { return H_; }

    void record(int t, double loss_sq) {
        if (t < 1 || t > T_) {
            throw ShapeError("LossHistory: t out of range");
        }
        auto& b = buf_[static_cast<std::size_t>(t - 1)];
        b[static_cast<std::size_t>(pos_[static_cast<std::size_t>(t - 1)])] = loss_sq;
        pos_[static_cast<std::size_t>(t - 1)] = (pos_[static_cast<std::size_t>(t - 1)] + 1) % H_;
        if (count_[static_cast<std::size_t>(t - 1)] < H_) {
            ++count_[static_cast<std::size_t>(t - 1)];
        }
    }

    bool warmed_up() const {
        for (int c : count_) {
            if (c < H_) {
                return false;
            }
        }
        return true;
    }

    // p(t) for t = 1..T at index t-1. Strictly positive, sums to 1.
    std::vector<double> probabilities() const {
        std::vector<double> p(static_cast<std::size_t>(T_), 1.0 / T_);
        if (!warmed_up()) {
            return p;
        }
        double sum = 0.0;
        for (int t = 0; t < T_; ++t) {
            double mean_sq = 0.0;
            for (int j = 0; j < H_; ++j) {
                mean_sq += buf_[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
            }
            mean_sq /= H_;
            p[static_cast<std::size_t>(t)] = std::sqrt(mean_sq);
            sum += p[static_cast<std::size_t>(t)];
        }
        constexpr double kUniformFloor = 1e-3;
        for (int t = 0; t < T_; ++t) {
            const double base = sum > 0.0 ? p[static_cast<std::size_t>(t)] / sum : 1.0 / T_;
            p[static_cast<std::size_t>(t)] = (1.0 - kUniformFloor) * base + kUniformFloor / T_;
        }
        return p;
    }

    void sample(int n, Rng& rng, std::vector<int>& ts, std::vector<double>& weights) const {
        const std::vector<double> p = probabilities();
        ts.resize(static_cast<std::size_t>(n));
        weights.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const double u = rng.uniform();
            double acc = 0.0;
            int t = T_;
            for (int j = 0; j < T_; ++j) {
                acc += p[static_cast<std::size_t>(j)];
                if (u < acc) {
                    t = j + 1;
                    break;
                }
            }
            ts[static_cast<std::size_t>(i)] = t;
            weights[static_cast<std::size_t>(i)] = 1.0 / (T_ * p[static_cast<std::size_t>(t - 1)]);
        }
    }

  private:
    int T_;
    int H_;
    std::vector<std::vector<double>> buf_;
    std::vector<int> pos_;
    std::vector<int> count_;
};

// ---------------------------------------------------------------------------
// Variational objective
// ---------------------------------------------------------------------------

struct LossBreakdown {
    double total = 0.0;
    double mse_term = 0.0;
    double t1_term = 0.0;
    double nll_term = 0.0;
};

struct VlbExample {
    const TokenSequence* wc = nullptr;
    const TokenSequence* wx = nullptr;
    int t = 1;
    double weight = 1.0;
};

struct VlbOptions {
    const NoiseSchedule* sched = nullptr;
    double sigma0 = 0.0;
    bool mask_pad = false;
    SelfCondKind selfcond = SelfCondKind::None;
    double zero_prob = 0.5;
};

// Self-conditioning training protocol around one denoiser invocation. With
// probability zero_prob the pass runs with a zeroed previous estimate;
// otherwise a first pass produces x0_bar, which is detached (stop gradient)
// and fed to the second pass. Only the final pass's output is returned.
template <class S, class Den>
ag::Var<S> selfcond_training_forward(ag::Tape<S>& tape, Den&& den, ag::Var<S> x_t,
                                     const TokenSequence& wc, int t, SelfCondKind kind,
                                     double zero_prob, Rng& rng_sc) {
    if (kind == SelfCondKind::None) {
        return den(tape, x_t, std::optional<ag::Var<S>>{}, wc, t);
    }
    ag::Var<S> zeros = tape.constant(Mat<S>::Zero(x_t.rows(), x_t.cols()));
    const double u = rng_sc.uniform();
    if (u < zero_prob) {
        return den(tape, x_t, std::optional<ag::Var<S>>(zeros), wc, t);
    }
    ag::Var<S> first = den(tape, x_t, std::optional<ag::Var<S>>(zeros), wc, t);
    ag::Var<S> prev = tape.detach(first);
    return den(tape, x_t, std::optional<ag::Var<S>>(prev), wc, t);
}

// Monte-Carlo estimator of the end-to-end objective: per example, one
// sampled timestep. t >= 2 contributes ||x0 - f(x_t, c, t)||^2, t = 1
// contributes ||Emb(w) - f(x_1, c, 1)||^2, and every example adds the
// rounding NLL evaluated on the (sigma0-jittered) x0. Importance weights
// multiply whole per-example losses; everything is averaged over batch and
// sequence positions.
template <class S, class Den>
ag::Var<S> vlb_loss_graph(ag::Tape<S>& tape, ag::Var<S> emb_x, ag::Var<S> rounding,
                          Den&& den, const std::vector<VlbExample>& batch,
                          const VlbOptions& opt, Rng& rng_noise, Rng& rng_sc,
                          LossBreakdown* breakdown = nullptr,
                          std::vector<double>* per_example = nullptr) {
    if (batch.empty()) {
        throw ShapeError("vlb_loss_graph: empty batch");
    }
    const NoiseSchedule& sched = *opt.sched;
    ag::Var<S> total = tape.constant(Mat<S>::Zero(1, 1));
    LossBreakdown bd;
    if (per_example) {
        per_example->clear();
    }
    double norm = 0.0;
    for (const auto& ex : batch) {
        norm += static_cast<double>(ex.wx->padded_len());
    }
    for (const auto& ex : batch) {
        sched.check_t(ex.t);
        const int k_x = ex.wx->padded_len();
        const int d_x = static_cast<int>(tape.value(emb_x).cols());

        ag::Var<S> x0 = tape.gather_rows(emb_x, ex.wx->ids);
        if (opt.sigma0 > 0.0) {
            Mat<S> jitter(k_x, d_x);
            for (int i = 0; i < k_x; ++i) {
                for (int j = 0; j < d_x; ++j) {
                    jitter(i, j) = static_cast<S>(opt.sigma0 * rng_noise.gaussian());
                }
            }
            x0 = tape.add(x0, tape.constant(std::move(jitter)));
        }

        // Rounding NLL on the clean x0 draw.
        ag::Var<S> logits = tape.matmul_nt(x0, rounding);
        std::vector<std::uint8_t> row_mask;
        if (opt.mask_pad) {
            row_mask.resize(ex.wx->ids.size());
            for (std::size_t i = 0; i < ex.wx->ids.size(); ++i) {
                row_mask[i] = ex.wx->ids[i] != Vocabulary::kPadId ? 1 : 0;
            }
        }
        ag::Var<S> nll = tape.cross_entropy_rows(logits, ex.wx->ids,
                                                 opt.mask_pad ? &row_mask : nullptr);

        // Diffuse to x_t and denoise.
        Mat<S> eps(k_x, d_x);
        for (int i = 0; i < k_x; ++i) {
            for (int j = 0; j < d_x; ++j) {
                eps(i, j) = static_cast<S>(rng_noise.gaussian());
            }
        }
        const double a = std::sqrt(sched.alpha_bar[ex.t]);
        const double b = std::sqrt(1.0 - sched.alpha_bar[ex.t]);
        ag::Var<S> x_t = tape.add(tape.mul_scalar(x0, a),
                                  tape.constant(Mat<S>(eps * static_cast<S>(b))));
        ag::Var<S> pred = selfcond_training_forward(tape, den, x_t, *ex.wc, ex.t, opt.selfcond,
                                                    opt.zero_prob, rng_sc);

        ag::Var<S> target = ex.t >= 2 ? x0 : tape.gather_rows(emb_x, ex.wx->ids);
        ag::Var<S> sq = tape.sum_squares(tape.sub(target, pred));

        ag::Var<S> ex_loss = tape.add(sq, nll);
        total = tape.add(total, tape.mul_scalar(ex_loss, ex.weight));

        const double sq_v = static_cast<double>(tape.value(sq)(0, 0));
        const double nll_v = static_cast<double>(tape.value(nll)(0, 0));
        if (ex.t >= 2) {
            bd.mse_term += ex.weight * sq_v;
        } else {
            bd.t1_term += ex.weight * sq_v;
        }
        bd.nll_term += ex.weight * nll_v;
        if (per_example) {
            per_example->push_back((sq_v + nll_v) / k_x);
        }
    }
    ag::Var<S> loss = tape.mul_scalar(total, 1.0 / norm);
    if (breakdown) {
        bd.mse_term /= norm;
        bd.t1_term /= norm;
        bd.nll_term /= norm;
        bd.total = static_cast<double>(tape.value(loss)(0, 0));
        *breakdown = bd;
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <class S>
class AdamW {
  public:
    explicit AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                   double weight_decay = 0.0)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    void step(ParameterSet<S>& params, double lr) {
        if (m_.empty()) {
            for (const auto& e : params.entries) {
                m_.push_back(Mat<S>::Zero(e.value.rows(), e.value.cols()));
                v_.push_back(Mat<S>::Zero(e.value.rows(), e.value.cols()));
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < params.entries.size(); ++i) {
            auto& e = params.entries[i];
            auto& m = m_[i];
            auto& v = v_[i];
            m = static_cast<S>(beta1_) * m + static_cast<S>(1.0 - beta1_) * e.grad;
            v = static_cast<S>(beta2_) * v
                + static_cast<S>(1.0 - beta2_) * e.grad.cwiseProduct(e.grad);
            Mat<S> m_hat = m / static_cast<S>(bc1);
            Mat<S> v_hat = v / static_cast<S>(bc2);
            if (weight_decay_ > 0.0) {
                e.value -= static_cast<S>(lr * weight_decay_) * e.value;
            }
            e.value -= (m_hat.array() * static_cast<S>(lr)
                        / (v_hat.array().sqrt() + static_cast<S>(eps_)))
                           .matrix();
        }
    }

    int steps_taken() const { return t_; }

  private:
    double beta1_, beta2_, eps_, weight_decay_;
    int t_ = 0;
    std::vector<Mat<S>> m_;
    std::vector<Mat<S>> v_;
};

// Global gradient-norm clip. Returns the pre-clip norm.
template <class S>
double clip_grad_norm(ParameterSet<S>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& e : params.entries) {
        sq += static_cast<double>(e.grad.template cast<double>().squaredNorm());
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const S scale = static_cast<S>(max_norm / norm);
        for (auto& e : params.entries) {
            e.grad *= scale;
        }
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr = 1e-4;
    int steps = 3000;
    int batch = 32;
    std::uint64_t seed = 1;
    double grad_clip = 1.0;
    double weight_decay = 0.0;
    bool loss_mask_pad = false;
    int history = 10;
    double selfcond_zero_prob = 0.5;
    int checkpoint_every = 0;  // 0: final checkpoint only

    void validate() const {
        if (lr <= 0.0) {
            throw ConfigError("TrainConfig: lr must be > 0");
        }
        if (steps < 1 || batch < 1) {
            throw ConfigError("TrainConfig: steps and batch must be positive");
        }
        if (history < 1) {
            throw ConfigError("TrainConfig: history must be >= 1");
        }
        if (selfcond_zero_prob < 0.0 || selfcond_zero_prob > 1.0) {
            throw ConfigError("TrainConfig: selfcond_zero_prob must lie in [0,1]");
        }
    }
};

// Linear decay from lr down to exactly 0 at the final step.
inline double lr_at_step(double lr0, int step, int total_steps) {
    if (total_steps <= 1) {
        return lr0;
    }
    return lr0 * (1.0 - static_cast<double>(step) / (total_steps - 1));
}

struct StepMetrics {
    int step = 0;
    double loss = 0.0;
    double mse_term = 0.0;
    double t1_term = 0.0;
    double nll_term = 0.0;
    double lr = 0.0;
    long wall_ms = 0;
};

struct TrainResult {
    int final_step = 0;
    double step0_loss = 0.0;
    double final_loss = 0.0;
};

// Tokenized (condition, target) pairs.
using TokenizedPair = std::pair<TokenSequence, TokenSequence>;

// AdamW with linear lr decay over the full budget. Per-step RNG substreams
// are derived from (seed, step), so resumed runs see the same draws as a
// single-phase run. Batches are sampled iid uniform from the dataset.
template <class S>
TrainResult train_loop(DenoiseModel<S>& model, const NoiseSchedule& sched,
                       const std::vector<TokenizedPair>& data, const TrainConfig& tc,
                       const std::function<void(const StepMetrics&)>& on_metrics,
                       const std::function<void(int)>& on_checkpoint = {},
                       int start_step = 0) {
    tc.validate();
    if (data.empty()) {
        throw ConfigError("train_loop: dataset is empty");
    }
    if (model.config().T != sched.T) {
        throw ConfigError("train_loop: model T and schedule T differ");
    }

    LossHistory hist(sched.T, tc.history);
    AdamW<S> opt(0.9, 0.999, 1e-8, tc.weight_decay);
    VlbOptions vopt;
    vopt.sched = &sched;
    vopt.sigma0 = model.embedding_spec().sigma0;
    vopt.mask_pad = tc.loss_mask_pad;
    vopt.selfcond = model.config().selfcond;
    vopt.zero_prob = tc.selfcond_zero_prob;

    TrainResult result;
    result.final_step = start_step;

    for (int step = start_step; step < tc.steps; ++step) {
        const auto t_start = std::chrono::steady_clock::now();
        const std::uint64_t step_key = tc.seed + 0x51D5EED00ULL;
        Rng rng_data = Rng::substream(step_key, static_cast<std::uint64_t>(step) * 8 + 1);
        Rng rng_t = Rng::substream(step_key, static_cast<std::uint64_t>(step) * 8 + 2);
        Rng rng_noise = Rng::substream(step_key, static_cast<std::uint64_t>(step) * 8 + 3);
        Rng rng_sc = Rng::substream(step_key, static_cast<std::uint64_t>(step) * 8 + 4);

        std::vector<int> ts;
        std::vector<double> weights;
        hist.sample(tc.batch, rng_t, ts, weights);

        std::vector<VlbExample> batch(static_cast<std::size_t>(tc.batch));
        for (int i = 0; i < tc.batch; ++i) {
            const auto& pair = data[static_cast<std::size_t>(
                rng_data.uniform_int(static_cast<int>(data.size())))];
            batch[static_cast<std::size_t>(i)] = {&pair.first, &pair.second,
                                                  ts[static_cast<std::size_t>(i)],
                                                  weights[static_cast<std::size_t>(i)]};
        }

        ag::Tape<S> tape(true);
        BoundParams<S> bound(tape, model.params());
        auto den = [&](ag::Tape<S>& tp, ag::Var<S> x_t, std::optional<ag::Var<S>> prev,
                       const TokenSequence& wc, int t) {
            return model.forward(tp, bound, x_t, prev, wc, t);
        };
        LossBreakdown bd;
        std::vector<double> per_example;
        ag::Var<S> loss = vlb_loss_graph(tape, bound[model.emb_x_index()],
                                         bound[model.rounding_index()], den, batch, vopt,
                                         rng_noise, rng_sc, &bd, &per_example);
        if (!std::isfinite(bd.total)) {
            std::ostringstream oss;
            oss << "train_loop: non-finite loss at step " << step << " (t values:";
            for (int t : ts) {
                oss << ' ' << t;
            }
            oss << ")";
            throw TrainDivergence(oss.str());
        }

        model.params().zero_grads();
        tape.backward(loss);
        bound.harvest();
        const double grad_norm = clip_grad_norm(model.params(), tc.grad_clip);
        if (!std::isfinite(grad_norm)) {
            std::ostringstream oss;
            oss << "train_loop: non-finite gradient norm at step " << step;
            throw TrainDivergence(oss.str());
        }
        const double lr = lr_at_step(tc.lr, step, tc.steps);
        opt.step(model.params(), lr);

        for (int i = 0; i < tc.batch; ++i) {
            const double l = per_example[static_cast<std::size_t>(i)];
            hist.record(ts[static_cast<std::size_t>(i)], l * l);
        }

        const auto t_end = std::chrono::steady_clock::now();
        StepMetrics sm;
        sm.step = step;
        sm.loss = bd.total;
        sm.mse_term = bd.mse_term;
        sm.t1_term = bd.t1_term;
        sm.nll_term = bd.nll_term;
        sm.lr = lr;
        sm.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(t_end - t_start).count();
        if (on_metrics) {
            on_metrics(sm);
        }
        if (step == 0) {
            result.step0_loss = bd.total;
        }
        result.final_loss = bd.total;
        result.final_step = step + 1;
        if (on_checkpoint && tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0
            && step + 1 < tc.steps) {
            on_checkpoint(step + 1);
        }
    }
    if (on_checkpoint) {
        on_checkpoint(result.final_step);
    }
    return result;
}

}  // namespace spiraldiff
