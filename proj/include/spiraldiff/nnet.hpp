#pragma once

#include "spiraldiff/autograd.hpp"
#include "spiraldiff/core.hpp"
#include "spiraldiff/params.hpp"
#include "spiraldiff/rng.hpp"
#include "spiraldiff/selfcond.hpp"
#include "spiraldiff/textspace.hpp"
#include "spiraldiff/vocab.hpp"

#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace spiraldiff {

enum class Arch { DiffuED, CaceNoSI, SIA };

inline const char* arch_name(Arch a) {
    switch (a) {
        case Arch::DiffuED: return "diffu-ed";
        case Arch::CaceNoSI: return "cace-no-si";
        case Arch::SIA: return "sia";
    }
    return "?";
}

inline Arch arch_from_name(const std::string& s) {
    if (s == "diffu-ed") return Arch::DiffuED;
    if (s == "cace-no-si") return Arch::CaceNoSI;
    if (s == "sia") return Arch::SIA;
    throw ConfigError("unknown arch '" + s + "' (expected diffu-ed | cace-no-si | sia)");
}

inline const char* selfcond_name(SelfCondKind k) {
    switch (k) {
        case SelfCondKind::None: return "none";
        case SelfCondKind::AType: return "a-type";
        case SelfCondKind::CType: return "c-type";
    }
    return "?";
}

inline SelfCondKind selfcond_from_name(const std::string& s) {
    if (s == "none") return SelfCondKind::None;
    if (s == "a-type") return SelfCondKind::AType;
    if (s == "c-type") return SelfCondKind::CType;
    throw ConfigError("unknown selfcond '" + s + "' (expected none | a-type | c-type)");
}

struct ModelConfig {
    int L_e = 2;
    int L_d = 2;
    int d_c = 64;
    int d_x = 32;
    int heads = 4;
    int ffn_mult = 4;
    Arch arch = Arch::SIA;
    SelfCondKind selfcond = SelfCondKind::CType;
    int T = 200;
    int k_c = 16;
    int k_x = 16;

    void validate() const {
        if (L_e < 0 || L_d < 1) {
            throw ConfigError("ModelConfig: need L_e >= 0 and L_d >= 1");
        }
        if (arch == Arch::SIA && L_e < 1) {
            throw ConfigError("ModelConfig: arch=sia requires L_e >= 1");
        }
        if (d_c < 1 || d_x < 1 || heads < 1) {
            throw ConfigError("ModelConfig: dimensions must be positive");
        }
        if (d_c % heads != 0 || d_x % heads != 0) {
            throw ConfigError("ModelConfig: heads must divide both d_c and d_x");
        }
        if (d_c % 2 != 0 || d_x % 2 != 0) {
            throw ConfigError("ModelConfig: embedding dims must be even (sinusoidal timestep)");
        }
        if (T < 1 || k_c < 1 || k_x < 1) {
            throw ConfigError("ModelConfig: T, k_c, k_x must be positive");
        }
    }
};

// ---------------------------------------------------------------------------
// Interleave planning (spiral interaction)
// ---------------------------------------------------------------------------

// One step of the resolved execution order.
//   Encoder step: runs CACE layer `layer`, cross-attending to decoder
//                 activation x^attends (0 = decoder input).
//   Decoder step: runs TD layer `layer`, cross-attending to encoder
//                 activation c^attends (attends == L_e is the final output).
struct PlanStep {
    enum class Kind { Encoder, Decoder };
    Kind kind;
    int layer;
    int attends;

    bool operator==(const PlanStep& o) const {
        return kind == o.kind && layer == o.layer && attends == o.attends;
    }
};

struct InterleavePlan {
    std::vector<PlanStep> steps;
};

inline PlanStep enc_step(int layer, int attends) {
    return {PlanStep::Kind::Encoder, layer, attends};
}
inline PlanStep dec_step(int layer, int attends) {
    return {PlanStep::Kind::Decoder, layer, attends};
}

// Resolves the three layer-count cases:
//   L_e == L_d: alternate E(m) -> D(m); E(m) sees the latest decoder
//               activation, D(m) sees c^{m+1}.
//   L_e <  L_d: interleave the first L_e pairs, then the remaining decoder
//               layers all attend to c^{L_e}.
//   L_e >  L_d: run the first L_e - L_d encoder layers against the decoder
//               input, then interleave the rest.
inline InterleavePlan plan_interleave(int L_e, int L_d) {
    if (L_e < 1 || L_d < 1) {
        throw ConfigError("plan_interleave: layer counts must be >= 1");
    }
    InterleavePlan plan;
    if (L_e <= L_d) {
        for (int m = 0; m < L_e; ++m) {
            plan.steps.push_back(enc_step(m, m));
            plan.steps.push_back(dec_step(m, m + 1));
        }
        for (int n = L_e; n < L_d; ++n) {
            plan.steps.push_back(dec_step(n, L_e));
        }
    } else {
        const int lead = L_e - L_d;
        for (int m = 0; m < lead; ++m) {
            plan.steps.push_back(enc_step(m, 0));
        }
        for (int j = 0; j < L_d; ++j) {
            plan.steps.push_back(enc_step(lead + j, j));
            plan.steps.push_back(dec_step(j, lead + j + 1));
        }
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Timestep features
// ---------------------------------------------------------------------------

// Raw sinusoid: first half sin(t * w_i), second half cos(t * w_i) with
// geometric frequencies w_i = 10000^{-i/(d/2)}. Injective over integer
// timesteps (the i = 0 frequency is 1).
template <class S>
RowVec<S> timestep_sinusoid(int t, int d) {
    if (d < 2 || d % 2 != 0) {
        throw ConfigError("timestep_sinusoid: dimension must be even and >= 2");
    }
    const int half = d / 2;
    RowVec<S> v(d);
    for (int i = 0; i < half; ++i) {
        const double w = std::pow(10000.0, -static_cast<double>(i) / half);
        v(i) = static_cast<S>(std::sin(t * w));
        v(half + i) = static_cast<S>(std::cos(t * w));
    }
    return v;
}

// ---------------------------------------------------------------------------
// Attention and transformer blocks (pre-norm residual sublayers)
// ---------------------------------------------------------------------------

struct AttnIdx {
    int wq = -1, bq = -1, wk = -1, bk = -1, wv = -1, bv = -1, wo = -1, bo = -1;
};
struct LnIdx {
    int gamma = -1, beta = -1;
};
struct FfnIdx {
    int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
};
struct TimeMlpIdx {
    int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
};

// Multi-head scaled dot-product attention. Queries come from q_in (k_q x
// d_q); keys/values are projected from kv_in (k_v x d_src) into d_q. Masked
// key positions receive exactly zero attention weight. Scaling is
// 1/sqrt(d_q/heads) per head; the output projection maps back to d_q.
template <class S>
ag::Var<S> attention(ag::Tape<S>& tape, const BoundParams<S>& b, const AttnIdx& p,
                     ag::Var<S> q_in, ag::Var<S> kv_in,
                     const std::vector<std::uint8_t>* kv_mask, int heads) {
    const int d_q = q_in.cols();
    if (d_q % heads != 0) {
        throw ShapeError("attention: heads must divide the query dimension");
    }
    if (kv_mask && static_cast<int>(kv_mask->size()) != kv_in.rows()) {
        throw ShapeError("attention: kv mask length must equal key count");
    }
    const int dh = d_q / heads;
    ag::Var<S> q = tape.add_rowvec(tape.matmul(q_in, b[p.wq]), b[p.bq]);
    ag::Var<S> k = tape.add_rowvec(tape.matmul(kv_in, b[p.wk]), b[p.bk]);
    ag::Var<S> v = tape.add_rowvec(tape.matmul(kv_in, b[p.wv]), b[p.bv]);
    std::vector<ag::Var<S>> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < heads; ++h) {
        ag::Var<S> qh = tape.cols(q, h * dh, dh);
        ag::Var<S> kh = tape.cols(k, h * dh, dh);
        ag::Var<S> vh = tape.cols(v, h * dh, dh);
        ag::Var<S> scores = tape.mul_scalar(tape.matmul_nt(qh, kh), scale);
        ag::Var<S> probs = tape.softmax_rows(scores, kv_mask);
        head_outs.push_back(tape.matmul(probs, vh));
    }
    ag::Var<S> concat = heads == 1 ? head_outs.front() : tape.concat_cols(head_outs);
    return tape.add_rowvec(tape.matmul(concat, b[p.wo]), b[p.bo]);
}

template <class S>
ag::Var<S> apply_ln(ag::Tape<S>& tape, const BoundParams<S>& b, const LnIdx& p, ag::Var<S> x) {
    return tape.layer_norm(x, b[p.gamma], b[p.beta]);
}

template <class S>
ag::Var<S> apply_ffn(ag::Tape<S>& tape, const BoundParams<S>& b, const FfnIdx& p, ag::Var<S> x) {
    ag::Var<S> h = tape.gelu(tape.add_rowvec(tape.matmul(x, b[p.w1]), b[p.b1]));
    return tape.add_rowvec(tape.matmul(h, b[p.w2]), b[p.b2]);
}

struct EncLayerIdx {
    LnIdx ln1;
    AttnIdx self_attn;
    LnIdx ln2;
    AttnIdx cross_attn;
    LnIdx ln3;
    FfnIdx ffn;
    bool has_cross = false;
};

struct DecLayerIdx {
    LnIdx ln1;
    AttnIdx self_attn;
    LnIdx ln2;
    AttnIdx cross_attn;
    LnIdx ln3;
    FfnIdx ffn;
};

// Plain conditional encoder layer: padding-masked self-attention + FFN.
template <class S>
ag::Var<S> encoder_plain_layer(ag::Tape<S>& tape, const BoundParams<S>& b, const EncLayerIdx& L,
                               ag::Var<S> c, const std::vector<std::uint8_t>& c_mask, int heads) {
    c = tape.add(c, attention(tape, b, L.self_attn, apply_ln(tape, b, L.ln1, c),
                              apply_ln(tape, b, L.ln1, c), &c_mask, heads));
    c = tape.add(c, apply_ffn(tape, b, L.ffn, apply_ln(tape, b, L.ln3, c)));
    return c;
}

// CACE layer: self-attention over the conditional stream, cross-attention
// with conditional queries against the target stream, then FFN.
template <class S>
ag::Var<S> cace_layer(ag::Tape<S>& tape, const BoundParams<S>& b, const EncLayerIdx& L,
                      ag::Var<S> c, ag::Var<S> x_ref, const std::vector<std::uint8_t>& c_mask,
                      const std::vector<std::uint8_t>* x_mask, int heads) {
    if (!L.has_cross) {
        throw ShapeError("cace_layer: layer was built without cross-attention parameters");
    }
    c = tape.add(c, attention(tape, b, L.self_attn, apply_ln(tape, b, L.ln1, c),
                              apply_ln(tape, b, L.ln1, c), &c_mask, heads));
    c = tape.add(c, attention(tape, b, L.cross_attn, apply_ln(tape, b, L.ln2, c), x_ref,
                              x_mask, heads));
    c = tape.add(c, apply_ffn(tape, b, L.ffn, apply_ln(tape, b, L.ln3, c)));
    return c;
}

// Target decoder layer: full (non-causal) self-attention, cross-attention to
// the conditional stream, FFN.
template <class S>
ag::Var<S> td_layer(ag::Tape<S>& tape, const BoundParams<S>& b, const DecLayerIdx& L,
                    ag::Var<S> x, ag::Var<S> c_ref, const std::vector<std::uint8_t>& c_mask,
                    int heads) {
    x = tape.add(x, attention(tape, b, L.self_attn, apply_ln(tape, b, L.ln1, x),
                              apply_ln(tape, b, L.ln1, x), nullptr, heads));
    x = tape.add(x, attention(tape, b, L.cross_attn, apply_ln(tape, b, L.ln2, x), c_ref,
                              &c_mask, heads));
    x = tape.add(x, apply_ffn(tape, b, L.ffn, apply_ln(tape, b, L.ln3, x)));
    return x;
}

// ---------------------------------------------------------------------------
// Denoising model
// ---------------------------------------------------------------------------

// f_theta(x_t, x0_prev, w_c, t) -> x0_hat. Owns the parameter set and the
// resolved interleave plan. Forward passes are pure given (params, inputs);
// the counters are observational only.
template <class S>
class DenoiseModel {
  public:
    using scalar_type = S;

    DenoiseModel(const ModelConfig& cfg, const EmbeddingSpec& espec, int vocab_size,
                 std::uint64_t seed)
        : cfg_(cfg), espec_(espec), vocab_size_(vocab_size) {
        cfg_.validate();
        espec_.validate();
        if (espec_.d_x != cfg_.d_x || espec_.d_c != cfg_.d_c) {
            throw ConfigError("DenoiseModel: EmbeddingSpec dims must match ModelConfig");
        }
        if (vocab_size_ < 1) {
            throw ConfigError("DenoiseModel: vocabulary must be non-empty");
        }
        if (cfg_.arch == Arch::SIA) {
            plan_ = plan_interleave(cfg_.L_e, cfg_.L_d);
        }
        build_params();
        initialize(seed);
    }

    DenoiseModel(const DenoiseModel&) = delete;
    DenoiseModel& operator=(const DenoiseModel&) = delete;

    const ModelConfig& config() const { return cfg_; }
    const EmbeddingSpec& embedding_spec() const { return espec_; }
    int vocab_size() const { return vocab_size_; }
    const InterleavePlan& plan() const { return plan_; }
    ParameterSet<S>& params() { return params_; }
    const ParameterSet<S>& params() const { return params_; }

    const Mat<S>& target_embedding() const { return params_.at(emb_x_).value; }

    // Rounding projection: the tied variant shares the target table.
    const Mat<S>& rounding_table() const {
        return espec_.tied_rounding ? params_.at(emb_x_).value : params_.at(round_head_).value;
    }

    long encoder_runs() const { return encoder_runs_.load(); }
    long denoise_calls() const { return denoise_calls_.load(); }
    void reset_counters() const {
        encoder_runs_.store(0);
        denoise_calls_.store(0);
    }

    struct EncoderCache {
        Mat<S> c_final;
        std::vector<std::uint8_t> mask;
    };

    static std::vector<std::uint8_t> condition_mask(const TokenSequence& wc) {
        std::vector<std::uint8_t> m(wc.ids.size());
        for (std::size_t i = 0; i < wc.ids.size(); ++i) {
            m[i] = wc.ids[i] != Vocabulary::kPadId ? 1 : 0;
        }
        return m;
    }

    // One-time conditional encoding for diffu-ed (c^{L_e} is t-independent
    // there, so a full sampling run can reuse it).
    EncoderCache encode_condition(const TokenSequence& wc) const {
        if (cfg_.arch != Arch::DiffuED) {
            throw ShapeError("encode_condition: cache is only valid for arch=diffu-ed");
        }
        ag::Tape<S> tape(false);
        BoundParams<S> bound(tape, const_cast<ParameterSet<S>&>(params_));
        auto mask = condition_mask(wc);
        ag::Var<S> c = encoder_input(tape, bound, wc, /*t=*/0);
        for (const auto& L : enc_layers_) {
            c = encoder_plain_layer(tape, bound, L, c, mask, cfg_.heads);
        }
        encoder_runs_.fetch_add(1);
        EncoderCache cache;
        cache.c_final = tape.value(c);
        cache.mask = std::move(mask);
        return cache;
    }

    // Full forward pass on a caller-provided tape. x0_prev must be supplied
    // whenever selfcond != none (zeros select the fallback branch).
    ag::Var<S> forward(ag::Tape<S>& tape, const BoundParams<S>& bound, ag::Var<S> x_t,
                       std::optional<ag::Var<S>> x0_prev, const TokenSequence& wc, int t,
                       const EncoderCache* cache = nullptr) const {
        if (t < 1 || t > cfg_.T) {
            throw ShapeError("denoise_forward: t outside [1, T]");
        }
        if (x_t.rows() != cfg_.k_x || x_t.cols() != cfg_.d_x) {
            throw ShapeError("denoise_forward: x_t must be k_x x d_x");
        }
        if (cfg_.selfcond != SelfCondKind::None && !x0_prev.has_value()) {
            throw ShapeError("denoise_forward: x0_prev required when self-conditioning is on");
        }
        if (wc.padded_len() > cfg_.k_c) {
            throw ShapeError("denoise_forward: condition longer than k_c");
        }
        denoise_calls_.fetch_add(1);

        // Decoder input: selfcond-combine, then positions, then timestep.
        ag::Var<S> x0dec = selfcond_combine(
            tape, cfg_.selfcond, x_t, x0_prev,
            sc_w_ >= 0 ? std::optional<ag::Var<S>>(bound[sc_w_]) : std::nullopt,
            sc_b_ >= 0 ? std::optional<ag::Var<S>>(bound[sc_b_]) : std::nullopt);
        x0dec = tape.add(x0dec, bound[pos_x_]);
        x0dec = tape.add_rowvec(x0dec, time_mlp(tape, bound, time_x_, t, cfg_.d_x));

        std::vector<std::uint8_t> mask =
            cache ? cache->mask : condition_mask(wc);

        ag::Var<S> x = x0dec;
        switch (cfg_.arch) {
            case Arch::DiffuED: {
                ag::Var<S> c_final;
                if (cache) {
                    c_final = tape.constant(cache->c_final);
                } else {
                    ag::Var<S> c = encoder_input(tape, bound, wc, /*t=*/0);
                    for (const auto& L : enc_layers_) {
                        c = encoder_plain_layer(tape, bound, L, c, mask, cfg_.heads);
                    }
                    encoder_runs_.fetch_add(1);
                    c_final = c;
                }
                for (const auto& L : dec_layers_) {
                    x = td_layer(tape, bound, L, x, c_final, mask, cfg_.heads);
                }
                break;
            }
            case Arch::CaceNoSI: {
                ag::Var<S> c = encoder_input(tape, bound, wc, t);
                for (const auto& L : enc_layers_) {
                    c = cace_layer(tape, bound, L, c, x0dec, mask, nullptr, cfg_.heads);
                }
                if (!enc_layers_.empty()) {
                    encoder_runs_.fetch_add(1);
                }
                for (const auto& L : dec_layers_) {
                    x = td_layer(tape, bound, L, x, c, mask, cfg_.heads);
                }
                break;
            }
            case Arch::SIA: {
                std::vector<ag::Var<S>> c_acts;
                std::vector<ag::Var<S>> x_acts;
                c_acts.push_back(encoder_input(tape, bound, wc, t));
                x_acts.push_back(x0dec);
                for (const auto& step : plan_.steps) {
                    if (step.kind == PlanStep::Kind::Encoder) {
                        c_acts.push_back(cace_layer(
                            tape, bound, enc_layers_[static_cast<std::size_t>(step.layer)],
                            c_acts.back(), x_acts[static_cast<std::size_t>(step.attends)], mask,
                            nullptr, cfg_.heads));
                    } else {
                        x_acts.push_back(td_layer(
                            tape, bound, dec_layers_[static_cast<std::size_t>(step.layer)],
                            x_acts.back(), c_acts[static_cast<std::size_t>(step.attends)], mask,
                            cfg_.heads));
                    }
                }
                encoder_runs_.fetch_add(1);
                x = x_acts.back();
                break;
            }
        }

        x = tape.layer_norm(x, bound[ln_f_.gamma], bound[ln_f_.beta]);
        return tape.add_rowvec(tape.matmul(x, bound[head_w_]), bound[head_b_]);
    }

    // Value-only forward for sampling (no gradient bookkeeping).
    Mat<S> denoise(const Mat<S>& x_t, const Mat<S>& x0_prev, const TokenSequence& wc, int t,
                   const EncoderCache* cache = nullptr) const {
        ag::Tape<S> tape(false);
        BoundParams<S> bound(tape, const_cast<ParameterSet<S>&>(params_));
        ag::Var<S> xt = tape.constant(x_t);
        std::optional<ag::Var<S>> prev;
        if (cfg_.selfcond != SelfCondKind::None) {
            prev = tape.constant(x0_prev);
        }
        return tape.value(forward(tape, bound, xt, prev, wc, t, cache));
    }

    // Parameter index lookups used by the training loss.
    int emb_x_index() const { return emb_x_; }
    int emb_c_index() const { return emb_c_; }
    int rounding_index() const { return espec_.tied_rounding ? emb_x_ : round_head_; }

  private:
    ag::Var<S> encoder_input(ag::Tape<S>& tape, const BoundParams<S>& bound,
                             const TokenSequence& wc, int t) const {
        ag::Var<S> c = tape.gather_rows(bound[emb_c_], wc.ids);
        std::vector<int> pos_ids(wc.ids.size());
        std::iota(pos_ids.begin(), pos_ids.end(), 0);
        c = tape.add(c, tape.gather_rows(bound[pos_c_], pos_ids));
        // diffu-ed keeps the encoder timestep-free so c^{L_e} can be cached
        // across the whole reverse trajectory (t = 0 sentinel).
        if (cfg_.arch != Arch::DiffuED && t >= 1) {
            c = tape.add_rowvec(c, time_mlp(tape, bound, time_c_, t, cfg_.d_c));
        }
        return c;
    }

    ag::Var<S> time_mlp(ag::Tape<S>& tape, const BoundParams<S>& bound, const TimeMlpIdx& p,
                        int t, int d) const {
        Mat<S> sin_feat(1, d);
        sin_feat.row(0) = timestep_sinusoid<S>(t, d);
        ag::Var<S> v = tape.constant(std::move(sin_feat));
        ag::Var<S> h = tape.gelu(tape.add_rowvec(tape.matmul(v, bound[p.w1]), bound[p.b1]));
        return tape.add_rowvec(tape.matmul(h, bound[p.w2]), bound[p.b2]);
    }

    AttnIdx add_attention(const std::string& prefix, int d_q, int d_src) {
        AttnIdx a;
        a.wq = params_.add(prefix + ".wq", d_q, d_q);
        a.bq = params_.add(prefix + ".bq", 1, d_q);
        a.wk = params_.add(prefix + ".wk", d_src, d_q);
        a.bk = params_.add(prefix + ".bk", 1, d_q);
        a.wv = params_.add(prefix + ".wv", d_src, d_q);
        a.bv = params_.add(prefix + ".bv", 1, d_q);
        a.wo = params_.add(prefix + ".wo", d_q, d_q);
        a.bo = params_.add(prefix + ".bo", 1, d_q);
        return a;
    }

    LnIdx add_ln(const std::string& prefix, int d) {
        LnIdx l;
        l.gamma = params_.add(prefix + ".gamma", 1, d);
        l.beta = params_.add(prefix + ".beta", 1, d);
        return l;
    }

    FfnIdx add_ffn(const std::string& prefix, int d) {
        FfnIdx f;
        f.w1 = params_.add(prefix + ".w1", d, d * cfg_.ffn_mult);
        f.b1 = params_.add(prefix + ".b1", 1, d * cfg_.ffn_mult);
        f.w2 = params_.add(prefix + ".w2", d * cfg_.ffn_mult, d);
        f.b2 = params_.add(prefix + ".b2", 1, d);
        return f;
    }

    TimeMlpIdx add_time_mlp(const std::string& prefix, int d) {
        TimeMlpIdx m;
        m.w1 = params_.add(prefix + ".w1", d, d * 4);
        m.b1 = params_.add(prefix + ".b1", 1, d * 4);
        m.w2 = params_.add(prefix + ".w2", d * 4, d);
        m.b2 = params_.add(prefix + ".b2", 1, d);
        return m;
    }

    void build_params() {
        emb_c_ = params_.add("emb_c", vocab_size_, cfg_.d_c);
        emb_x_ = params_.add("emb_x", vocab_size_, cfg_.d_x);
        pos_c_ = params_.add("pos_c", cfg_.k_c, cfg_.d_c);
        pos_x_ = params_.add("pos_x", cfg_.k_x, cfg_.d_x);
        time_x_ = add_time_mlp("time_x", cfg_.d_x);
        if (cfg_.arch != Arch::DiffuED) {
            time_c_ = add_time_mlp("time_c", cfg_.d_c);
        }
        const bool enc_cross = cfg_.arch != Arch::DiffuED;
        for (int m = 0; m < cfg_.L_e; ++m) {
            const std::string p = "enc." + std::to_string(m);
            EncLayerIdx L;
            L.ln1 = add_ln(p + ".ln1", cfg_.d_c);
            L.self_attn = add_attention(p + ".self", cfg_.d_c, cfg_.d_c);
            if (enc_cross) {
                L.ln2 = add_ln(p + ".ln2", cfg_.d_c);
                L.cross_attn = add_attention(p + ".cross", cfg_.d_c, cfg_.d_x);
                L.has_cross = true;
            }
            L.ln3 = add_ln(p + ".ln3", cfg_.d_c);
            L.ffn = add_ffn(p + ".ffn", cfg_.d_c);
            enc_layers_.push_back(L);
        }
        for (int n = 0; n < cfg_.L_d; ++n) {
            const std::string p = "dec." + std::to_string(n);
            DecLayerIdx L;
            L.ln1 = add_ln(p + ".ln1", cfg_.d_x);
            L.self_attn = add_attention(p + ".self", cfg_.d_x, cfg_.d_x);
            L.ln2 = add_ln(p + ".ln2", cfg_.d_x);
            L.cross_attn = add_attention(p + ".cross", cfg_.d_x, cfg_.d_c);
            L.ln3 = add_ln(p + ".ln3", cfg_.d_x);
            L.ffn = add_ffn(p + ".ffn", cfg_.d_x);
            dec_layers_.push_back(L);
        }
        ln_f_ = add_ln("dec.ln_f", cfg_.d_x);
        head_w_ = params_.add("head.w", cfg_.d_x, cfg_.d_x);
        head_b_ = params_.add("head.b", 1, cfg_.d_x);
        if (cfg_.selfcond == SelfCondKind::CType) {
            sc_w_ = params_.add("selfcond.w", 2 * cfg_.d_x, cfg_.d_x);
            sc_b_ = params_.add("selfcond.b", 1, cfg_.d_x);
        }
        if (!espec_.tied_rounding) {
            round_head_ = params_.add("round.head", vocab_size_, cfg_.d_x);
        }
    }

    void initialize(std::uint64_t seed) {
        Rng rng = Rng::substream(seed, 0xABCD0001ULL);
        constexpr double kProjStd = 0.02;
        for (auto& e : params_.entries) {
            const auto& name = e.name;
            const bool is_bias = name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0;
            if (name == "emb_c" || name == "emb_x" || name == "round.head") {
                init::gaussian(e.value, rng, 1.0);
            } else if (name == "head.w") {
                init::identity_block(e.value);
            } else if (name == "selfcond.w") {
                // [I ; 0]: the x_t block passes through, the previous
                // estimate starts ignored.
                e.value.setZero();
                for (int i = 0; i < cfg_.d_x; ++i) {
                    e.value(i, i) = static_cast<S>(1);
                }
            } else if (name.size() > 6 && name.compare(name.size() - 6, 6, ".gamma") == 0) {
                e.value.setOnes();
            } else if (name.size() > 5 && name.compare(name.size() - 5, 5, ".beta") == 0) {
                e.value.setZero();
            } else if (is_bias || name.ends_with(".b1") || name.ends_with(".b2")
                       || name.ends_with(".bq") || name.ends_with(".bk")
                       || name.ends_with(".bv") || name.ends_with(".bo")
                       || name == "selfcond.b") {
                e.value.setZero();
            } else if (name == "pos_c" || name == "pos_x") {
                init::gaussian(e.value, rng, kProjStd);
            } else {
                init::gaussian(e.value, rng, kProjStd);
            }
        }
    }

    ModelConfig cfg_;
    EmbeddingSpec espec_;
    int vocab_size_;
    InterleavePlan plan_;
    ParameterSet<S> params_;
    std::vector<EncLayerIdx> enc_layers_;
    std::vector<DecLayerIdx> dec_layers_;
    LnIdx ln_f_;
    int emb_c_ = -1, emb_x_ = -1, pos_c_ = -1, pos_x_ = -1;
    TimeMlpIdx time_x_;
    TimeMlpIdx time_c_;
    int head_w_ = -1, head_b_ = -1;
    int sc_w_ = -1, sc_b_ = -1;
    int round_head_ = -1;

    mutable std::atomic<long> encoder_runs_{0};
    mutable std::atomic<long> denoise_calls_{0};
};

}  // namespace spiraldiff
