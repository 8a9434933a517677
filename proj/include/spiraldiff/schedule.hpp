#pragma once

#include "spiraldiff/core.hpp"

#include <cmath>
#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

namespace spiraldiff {

// All per-timestep Gaussian diffusion coefficients. Arrays are indexed by
// timestep t in [1, T]; index 0 is the trivial boundary (alpha_bar_0 = 1).
// Everything here is 64-bit: the posterior coefficients near t = 1 are
// ill-conditioned and must not be formed in single precision.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;           // beta[t], t in 1..T; beta[0] unused
    std::vector<double> alpha;          // alpha_t = 1 - beta_t
    std::vector<double> alpha_bar;      // alpha_bar[0] = 1, cumulative product
    std::vector<double> posterior_var;  // beta_tilde_t
    std::vector<double> post_coef_x0;   // sqrt(abar_{t-1}) * beta_t / (1 - abar_t)
    std::vector<double> post_coef_xt;   // sqrt(alpha_t) * (1 - abar_{t-1}) / (1 - abar_t)

    // Rebuilds every derived array from T and beta[1..T], checking ranges.
    void derive_from_betas() {
        if (T < 1) {
            throw ConfigError("NoiseSchedule: T must be >= 1, got " + std::to_string(T));
        }
        if (static_cast<int>(beta.size()) != T + 1) {
            throw ConfigError("NoiseSchedule: beta array must have length T + 1");
        }
        alpha.assign(T + 1, 0.0);
        alpha_bar.assign(T + 1, 0.0);
        posterior_var.assign(T + 1, 0.0);
        post_coef_x0.assign(T + 1, 0.0);
        post_coef_xt.assign(T + 1, 0.0);
        alpha_bar[0] = 1.0;
        for (int t = 1; t <= T; ++t) {
            if (!(beta[t] > 0.0 && beta[t] < 1.0)) {
                throw ConfigError("NoiseSchedule: beta_" + std::to_string(t) + " outside (0,1)");
            }
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha[t] * alpha_bar[t - 1];
            const double one_minus_abar = 1.0 - alpha_bar[t];
            posterior_var[t] = (1.0 - alpha_bar[t - 1]) / one_minus_abar * beta[t];
            post_coef_x0[t] = std::sqrt(alpha_bar[t - 1]) * beta[t] / one_minus_abar;
            post_coef_xt[t] = std::sqrt(alpha[t]) * (1.0 - alpha_bar[t - 1]) / one_minus_abar;
        }
    }

    static NoiseSchedule from_betas(std::vector<double> betas_1_to_T) {
        NoiseSchedule s;
        s.T = static_cast<int>(betas_1_to_T.size());
        s.beta.assign(s.T + 1, 0.0);
        for (int t = 1; t <= s.T; ++t) {
            s.beta[t] = betas_1_to_T[static_cast<std::size_t>(t - 1)];
        }
        s.derive_from_betas();
        return s;
    }

    void check_t(int t) const {
        if (t < 1 || t > T) {
            throw ShapeError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
        }
    }
};

// sqrt schedule: alpha_bar_t = 1 - sqrt(t/T + s). The raw curve goes negative
// at t = T for any s > 0, so betas are recovered as 1 - abar_t/abar_{t-1},
// clipped to (1e-8, 0.999), and alpha_bar is rebuilt as the cumulative
// product of the clipped alphas (keeping it positive and strictly decreasing).
inline NoiseSchedule build_sqrt_schedule(int T, double s = 1e-4) {
    if (T < 1) {
        throw ConfigError("build_sqrt_schedule: T must be positive, got " + std::to_string(T));
    }
    if (!(s > 0.0 && s < 1.0)) {
        throw ConfigError("build_sqrt_schedule: offset s must lie in (0,1), got " + std::to_string(s));
    }
    constexpr double kBetaMin = 1e-8;
    constexpr double kBetaMax = 0.999;
    std::vector<double> betas(static_cast<std::size_t>(T));
    double abar_prev = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double abar_raw = 1.0 - std::sqrt(static_cast<double>(t) / T + s);
        double b = 1.0 - abar_raw / abar_prev;
        if (b < kBetaMin) b = kBetaMin;
        if (b > kBetaMax) b = kBetaMax;
        betas[static_cast<std::size_t>(t - 1)] = b;
        abar_prev = (abar_raw > 0.0) ? abar_raw : abar_prev * (1.0 - b);
    }
    return NoiseSchedule::from_betas(std::move(betas));
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise. Pure function of inputs.
template <class S>
Mat<S> q_sample(const NoiseSchedule& sched, const Mat<S>& x0, int t, const Mat<S>& noise) {
    sched.check_t(t);
    if (x0.rows() != noise.rows() || x0.cols() != noise.cols()) {
        throw ShapeError("q_sample: x0 and noise shapes differ");
    }
    const double a = std::sqrt(sched.alpha_bar[t]);
    const double b = std::sqrt(1.0 - sched.alpha_bar[t]);
    return static_cast<S>(a) * x0 + static_cast<S>(b) * noise;
}

// Posterior q(x_{t-1} | x_t, x0): mean = c0 * x0_hat + ct * x_t, isotropic
// variance beta_tilde_t.
template <class S>
std::pair<Mat<S>, double> posterior_mean_var(const NoiseSchedule& sched, const Mat<S>& x_t,
                                             const Mat<S>& x0_hat, int t) {
    sched.check_t(t);
    if (x_t.rows() != x0_hat.rows() || x_t.cols() != x0_hat.cols()) {
        throw ShapeError("posterior_mean_var: x_t and x0_hat shapes differ");
    }
    Mat<S> mean = static_cast<S>(sched.post_coef_x0[t]) * x0_hat
                  + static_cast<S>(sched.post_coef_xt[t]) * x_t;
    return {std::move(mean), sched.posterior_var[t]};
}

// CSV dump for the inspect-schedule subcommand: t, beta_t, alpha_bar_t,
// posterior_var_t, one row per timestep.
inline void write_schedule_csv(const NoiseSchedule& sched, std::ostream& out) {
    out << "t,beta,alpha_bar,posterior_var\n";
    out.precision(17);
    for (int t = 1; t <= sched.T; ++t) {
        out << t << ',' << sched.beta[t] << ',' << sched.alpha_bar[t] << ','
            << sched.posterior_var[t] << '\n';
    }
}

}  // namespace spiraldiff
