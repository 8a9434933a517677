#pragma once

#include "spiraldiff/autograd.hpp"
#include "spiraldiff/core.hpp"
#include "spiraldiff/params.hpp"

#include <optional>

namespace spiraldiff {

enum class SelfCondKind { None, AType, CType };

// Self-conditioning hyperparameters. The c-type combiner weights live in the
// model's ParameterSet ("selfcond.w"/"selfcond.b", 2*d_x -> d_x, initialized
// so that combine(x_t, anything) == x_t at step 0).
struct SelfCondSpec {
    SelfCondKind kind = SelfCondKind::None;
    double zero_prob = 0.5;

    void validate() const {
        if (zero_prob < 0.0 || zero_prob > 1.0) {
            throw ConfigError("SelfCondSpec: zero_prob must lie in [0,1]");
        }
    }
};

// Merges the current noisy sample with the previous x0 estimate.
//   none:   x_t unchanged
//   a-type: x_t + x0_prev
//   c-type: Linear([x_t ; x0_prev] along hidden dim)
template <class S>
ag::Var<S> selfcond_combine(ag::Tape<S>& tape, SelfCondKind kind, ag::Var<S> x_t,
                            std::optional<ag::Var<S>> x0_prev,
                            std::optional<ag::Var<S>> combiner_w = std::nullopt,
                            std::optional<ag::Var<S>> combiner_b = std::nullopt) {
    if (kind == SelfCondKind::None) {
        return x_t;
    }
    if (!x0_prev.has_value()) {
        throw ShapeError("selfcond_combine: x0_prev required for a-type/c-type");
    }
    if (x_t.rows() != x0_prev->rows() || x_t.cols() != x0_prev->cols()) {
        throw ShapeError("selfcond_combine: x_t and x0_prev shapes differ");
    }
    if (kind == SelfCondKind::AType) {
        return tape.add(x_t, *x0_prev);
    }
    if (!combiner_w.has_value() || !combiner_b.has_value()) {
        throw ShapeError("selfcond_combine: c-type requires combiner parameters");
    }
    ag::Var<S> cat = tape.concat_cols({x_t, *x0_prev});
    return tape.add_rowvec(tape.matmul(cat, *combiner_w), *combiner_b);
}

}  // namespace spiraldiff
