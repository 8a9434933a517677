#pragma once

#include "spiraldiff/core.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace spiraldiff::ag {

// Reverse-mode autodiff over dense matrices. A Tape owns the node arena for
// one forward/backward episode; Vars are cheap handles into it. With
// grad_enabled = false the tape stores values only (sampling path).
//
// Backward closures reference nodes by index, never by pointer, so arena
// growth cannot invalidate them.

template <class S>
class Tape;

template <class S>
class Var {
  public:
    Var() = default;
    const Mat<S>& value() const { return tape_->node_value(idx_); }
    int rows() const { return static_cast<int>(value().rows()); }
    int cols() const { return static_cast<int>(value().cols()); }
    bool valid() const { return tape_ != nullptr; }
    int index() const { return idx_; }

  private:
    friend class Tape<S>;
    Var(Tape<S>* tape, int idx) : tape_(tape), idx_(idx) {}
    Tape<S>* tape_ = nullptr;
    int idx_ = -1;
};

template <class S>
class Tape {
  public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }

    Var<S> constant(Mat<S> v) { return push(std::move(v), false, {}); }

    Var<S> leaf(Mat<S> v) { return push(std::move(v), grad_enabled_, {}); }

    const Mat<S>& value(Var<S> v) const { return node_value(v.idx_); }

    Mat<S> grad(Var<S> v) const {
        const Node& n = nodes_[static_cast<std::size_t>(v.idx_)];
        if (!n.has_grad) {
            return Mat<S>::Zero(n.value.rows(), n.value.cols());
        }
        return n.grad;
    }

    // ---- elementwise / structural ops ----

    Var<S> add(Var<S> a, Var<S> b) {
        check_same_shape(a, b, "add");
        Mat<S> v = value(a) + value(b);
        return unary_or_binary(std::move(v), {a.idx_, b.idx_}, [](Tape& t, int self, int pa, int pb) {
            const Mat<S>& g = t.node_grad(self);
            t.accumulate(pa, g);
            t.accumulate(pb, g);
        });
    }

    Var<S> sub(Var<S> a, Var<S> b) {
        check_same_shape(a, b, "sub");
        Mat<S> v = value(a) - value(b);
        return unary_or_binary(std::move(v), {a.idx_, b.idx_}, [](Tape& t, int self, int pa, int pb) {
            const Mat<S>& g = t.node_grad(self);
            t.accumulate(pa, g);
            t.accumulate(pb, Mat<S>(-g));
        });
    }

    Var<S> mul_scalar(Var<S> a, double c) {
        Mat<S> v = value(a) * static_cast<S>(c);
        const S sc = static_cast<S>(c);
        return unary_or_binary(std::move(v), {a.idx_, -1}, [sc](Tape& t, int self, int pa, int) {
            t.accumulate(pa, (t.node_grad(self) * sc).eval());
        });
    }

    // a (k x d) + b (1 x d) broadcast over rows.
    Var<S> add_rowvec(Var<S> a, Var<S> b) {
        if (value(b).rows() != 1 || value(a).cols() != value(b).cols()) {
            throw ShapeError("add_rowvec: bias must be 1 x cols(a)");
        }
        Mat<S> v = value(a);
        v.rowwise() += value(b).row(0);
        return unary_or_binary(std::move(v), {a.idx_, b.idx_}, [](Tape& t, int self, int pa, int pb) {
            const Mat<S>& g = t.node_grad(self);
            t.accumulate(pa, g);
            t.accumulate(pb, Mat<S>(g.colwise().sum()));
        });
    }

    Var<S> matmul(Var<S> a, Var<S> b) {
        if (value(a).cols() != value(b).rows()) {
            throw ShapeError("matmul: inner dimensions differ");
        }
        Mat<S> v = value(a) * value(b);
        return unary_or_binary(std::move(v), {a.idx_, b.idx_}, [](Tape& t, int self, int pa, int pb) {
            const Mat<S>& g = t.node_grad(self);
            t.accumulate(pa, Mat<S>(g * t.node_value(pb).transpose()));
            t.accumulate(pb, Mat<S>(t.node_value(pa).transpose() * g));
        });
    }

    // a * b^T
    Var<S> matmul_nt(Var<S> a, Var<S> b) {
        if (value(a).cols() != value(b).cols()) {
            throw ShapeError("matmul_nt: inner dimensions differ");
        }
        Mat<S> v = value(a) * value(b).transpose();
        return unary_or_binary(std::move(v), {a.idx_, b.idx_}, [](Tape& t, int self, int pa, int pb) {
            const Mat<S>& g = t.node_grad(self);
            t.accumulate(pa, Mat<S>(g * t.node_value(pb)));
            t.accumulate(pb, Mat<S>(g.transpose() * t.node_value(pa)));
        });
    }

    Var<S> cols(Var<S> a, int start, int n) {
        if (start < 0 || n < 1 || start + n > value(a).cols()) {
            throw ShapeError("cols: slice out of range");
        }
        Mat<S> v = value(a).middleCols(start, n);
        return unary_or_binary(std::move(v), {a.idx_, -1}, [start, n](Tape& t, int self, int pa, int) {
            const Mat<S>& g = t.node_grad(self);
            Mat<S> full = Mat<S>::Zero(t.node_value(pa).rows(), t.node_value(pa).cols());
            full.middleCols(start, n) = g;
            t.accumulate(pa, full);
        });
    }

    Var<S> concat_cols(const std::vector<Var<S>>& parts) {
        if (parts.empty()) {
            throw ShapeError("concat_cols: empty part list");
        }
        const int rows = parts.front().rows();
        int total = 0;
        for (const auto& p : parts) {
            if (p.rows() != rows) {
                throw ShapeError("concat_cols: row counts differ");
            }
            total += p.cols();
        }
        Mat<S> v(rows, total);
        std::vector<int> idxs;
        std::vector<int> offsets;
        std::vector<int> widths;
        int off = 0;
        for (const auto& p : parts) {
            v.middleCols(off, p.cols()) = value(p);
            idxs.push_back(p.idx_);
            offsets.push_back(off);
            widths.push_back(p.cols());
            off += p.cols();
        }
        bool rg = false;
        for (int i : idxs) {
            rg = rg || nodes_[static_cast<std::size_t>(i)].requires_grad;
        }
        if (!grad_enabled_ || !rg) {
            return push(std::move(v), false, {});
        }
        Var<S> out = push(std::move(v), true, {});
        const int self = out.idx_;
        nodes_[static_cast<std::size_t>(self)].back =
            [self, idxs, offsets, widths](Tape& t) {
                const Mat<S>& g = t.node_grad(self);
                for (std::size_t k = 0; k < idxs.size(); ++k) {
                    t.accumulate(idxs[k], Mat<S>(g.middleCols(offsets[k], widths[k])));
                }
            };
        return out;
    }

    // Row-wise softmax. `keep` (length = cols) marks attendable key columns;
    // masked columns get exactly zero probability. A fully masked row is a
    // contract violation (would be NaN) and is rejected.
    Var<S> softmax_rows(Var<S> a, const std::vector<std::uint8_t>* keep = nullptr) {
        const Mat<S>& x = value(a);
        if (keep && static_cast<int>(keep->size()) != x.cols()) {
            throw ShapeError("softmax_rows: mask length must equal column count");
        }
        Mat<S> p(x.rows(), x.cols());
        for (int i = 0; i < x.rows(); ++i) {
            S m = std::numeric_limits<S>::lowest();
            bool any = false;
            for (int j = 0; j < x.cols(); ++j) {
                if (!keep || (*keep)[static_cast<std::size_t>(j)]) {
                    any = true;
                    m = std::max(m, x(i, j));
                }
            }
            if (!any) {
                throw ShapeError("softmax_rows: all key positions masked");
            }
            S denom = 0;
            for (int j = 0; j < x.cols(); ++j) {
                if (!keep || (*keep)[static_cast<std::size_t>(j)]) {
                    p(i, j) = std::exp(x(i, j) - m);
                    denom += p(i, j);
                } else {
                    p(i, j) = 0;
                }
            }
            p.row(i) /= denom;
        }
        return unary_or_binary(std::move(p), {a.idx_, -1}, [](Tape& t, int self, int pa, int) {
            const Mat<S>& g = t.node_grad(self);
            const Mat<S>& p = t.node_value(self);
            Mat<S> gp = g.cwiseProduct(p);
            Mat<S> dx = gp;
            for (int i = 0; i < dx.rows(); ++i) {
                dx.row(i) -= p.row(i) * gp.row(i).sum();
            }
            t.accumulate(pa, dx);
        });
    }

    // Per-row layer normalization over the hidden dimension with learned
    // gain/bias (1 x d each).
    Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, double eps = 1e-5) {
        const Mat<S>& xv = value(x);
        const int d = static_cast<int>(xv.cols());
        if (value(gamma).rows() != 1 || value(gamma).cols() != d || value(beta).rows() != 1
            || value(beta).cols() != d) {
            throw ShapeError("layer_norm: gamma/beta must be 1 x hidden");
        }
        Mat<S> xhat(xv.rows(), d);
        Mat<S> inv_sigma(xv.rows(), 1);
        for (int i = 0; i < xv.rows(); ++i) {
            const S mu = xv.row(i).mean();
            const S var = (xv.row(i).array() - mu).square().sum() / static_cast<S>(d);
            const S is = static_cast<S>(1.0) / std::sqrt(var + static_cast<S>(eps));
            inv_sigma(i, 0) = is;
            xhat.row(i) = (xv.row(i).array() - mu) * is;
        }
        Mat<S> y = xhat;
        for (int i = 0; i < y.rows(); ++i) {
            y.row(i) = y.row(i).cwiseProduct(value(gamma).row(0)) + value(beta).row(0);
        }
        const int xi = x.idx_;
        const int gi = gamma.idx_;
        const int bi = beta.idx_;
        bool rg = nodes_[static_cast<std::size_t>(xi)].requires_grad
                  || nodes_[static_cast<std::size_t>(gi)].requires_grad
                  || nodes_[static_cast<std::size_t>(bi)].requires_grad;
        if (!grad_enabled_ || !rg) {
            return push(std::move(y), false, {});
        }
        Var<S> out = push(std::move(y), true, {});
        const int self = out.idx_;
        // Cache normalized activations and inverse sigmas by value.
        nodes_[static_cast<std::size_t>(self)].back =
            [self, xi, gi, bi, xhat, inv_sigma, d](Tape& t) {
                const Mat<S>& g = t.node_grad(self);
                t.accumulate(bi, Mat<S>(g.colwise().sum()));
                t.accumulate(gi, Mat<S>(g.cwiseProduct(xhat).colwise().sum()));
                const Mat<S>& gamma_v = t.node_value(gi);
                Mat<S> dx(g.rows(), g.cols());
                for (int i = 0; i < g.rows(); ++i) {
                    RowVec<S> gg = g.row(i).cwiseProduct(gamma_v.row(0));
                    const S m1 = gg.mean();
                    const S m2 = gg.cwiseProduct(xhat.row(i)).mean();
                    dx.row(i) = (gg.array() - m1 - xhat.row(i).array() * m2) * inv_sigma(i, 0);
                }
                t.accumulate(xi, dx);
            };
        return out;
    }

    // Exact (erf-based) GELU.
    Var<S> gelu(Var<S> a) {
        const Mat<S>& x = value(a);
        Mat<S> y = x.unaryExpr([](S v) {
            return static_cast<S>(0.5) * v
                   * (static_cast<S>(1) + std::erf(v * static_cast<S>(0.7071067811865476)));
        });
        return unary_or_binary(std::move(y), {a.idx_, -1}, [](Tape& t, int self, int pa, int) {
            const Mat<S>& x = t.node_value(pa);
            Mat<S> d = x.unaryExpr([](S v) {
                const S phi = std::exp(static_cast<S>(-0.5) * v * v)
                              * static_cast<S>(0.3989422804014327);
                const S cdf = static_cast<S>(0.5)
                              * (static_cast<S>(1) + std::erf(v * static_cast<S>(0.7071067811865476)));
                return cdf + v * phi;
            });
            t.accumulate(pa, Mat<S>(t.node_grad(self).cwiseProduct(d)));
        });
    }

    // Embedding lookup: out row i = table row ids[i]. Backward scatter-adds.
    Var<S> gather_rows(Var<S> table, const std::vector<int>& ids) {
        const Mat<S>& tv = value(table);
        for (int id : ids) {
            if (id < 0 || id >= tv.rows()) {
                throw ShapeError("gather_rows: id out of range");
            }
        }
        Mat<S> v(static_cast<int>(ids.size()), tv.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            v.row(static_cast<int>(i)) = tv.row(ids[i]);
        }
        const int ti = table.idx_;
        bool rg = nodes_[static_cast<std::size_t>(ti)].requires_grad;
        if (!grad_enabled_ || !rg) {
            return push(std::move(v), false, {});
        }
        Var<S> out = push(std::move(v), true, {});
        const int self = out.idx_;
        nodes_[static_cast<std::size_t>(self)].back = [self, ti, ids](Tape& t) {
            const Mat<S>& g = t.node_grad(self);
            Mat<S> acc = Mat<S>::Zero(t.node_value(ti).rows(), t.node_value(ti).cols());
            for (std::size_t i = 0; i < ids.size(); ++i) {
                acc.row(ids[i]) += g.row(static_cast<int>(i));
            }
            t.accumulate(ti, acc);
        };
        return out;
    }

    // Value copy with the gradient path severed.
    Var<S> detach(Var<S> a) { return constant(value(a)); }

    // Frobenius inner product with itself -> 1x1.
    Var<S> sum_squares(Var<S> a) {
        Mat<S> v(1, 1);
        v(0, 0) = value(a).squaredNorm();
        return unary_or_binary(std::move(v), {a.idx_, -1}, [](Tape& t, int self, int pa, int) {
            const S g = t.node_grad(self)(0, 0);
            t.accumulate(pa, Mat<S>(t.node_value(pa) * (static_cast<S>(2) * g)));
        });
    }

    // Sum over (unmasked) rows of -log softmax(logits_row)[target]. Stable
    // log-sum-exp; backward is (softmax - onehot) per row.
    Var<S> cross_entropy_rows(Var<S> logits, const std::vector<int>& targets,
                              const std::vector<std::uint8_t>* row_mask = nullptr) {
        const Mat<S>& x = value(logits);
        if (static_cast<int>(targets.size()) != x.rows()) {
            throw ShapeError("cross_entropy_rows: one target per row required");
        }
        if (row_mask && static_cast<int>(row_mask->size()) != x.rows()) {
            throw ShapeError("cross_entropy_rows: row mask length mismatch");
        }
        Mat<S> probs(x.rows(), x.cols());
        double total = 0.0;
        for (int i = 0; i < x.rows(); ++i) {
            const int tgt = targets[static_cast<std::size_t>(i)];
            if (tgt < 0 || tgt >= x.cols()) {
                throw ShapeError("cross_entropy_rows: target id out of range");
            }
            const S m = x.row(i).maxCoeff();
            S denom = 0;
            for (int j = 0; j < x.cols(); ++j) {
                probs(i, j) = std::exp(x(i, j) - m);
                denom += probs(i, j);
            }
            probs.row(i) /= denom;
            if (!row_mask || (*row_mask)[static_cast<std::size_t>(i)]) {
                total += -(static_cast<double>(x(i, tgt) - m) - std::log(static_cast<double>(denom)));
            }
        }
        Mat<S> v(1, 1);
        v(0, 0) = static_cast<S>(total);
        const int li = logits.idx_;
        bool rg = nodes_[static_cast<std::size_t>(li)].requires_grad;
        if (!grad_enabled_ || !rg) {
            return push(std::move(v), false, {});
        }
        std::vector<std::uint8_t> mask_copy;
        if (row_mask) {
            mask_copy = *row_mask;
        }
        Var<S> out = push(std::move(v), true, {});
        const int self = out.idx_;
        nodes_[static_cast<std::size_t>(self)].back =
            [self, li, targets, probs, mask_copy](Tape& t) {
                const S g = t.node_grad(self)(0, 0);
                Mat<S> dx = probs;
                for (int i = 0; i < dx.rows(); ++i) {
                    if (!mask_copy.empty() && !mask_copy[static_cast<std::size_t>(i)]) {
                        dx.row(i).setZero();
                        continue;
                    }
                    dx(i, targets[static_cast<std::size_t>(i)]) -= static_cast<S>(1);
                }
                t.accumulate(li, Mat<S>(dx * g));
            };
        return out;
    }

    // Runs reverse accumulation from a 1x1 root.
    void backward(Var<S> root) {
        if (!grad_enabled_) {
            throw std::logic_error("Tape: backward on a grad-disabled tape");
        }
        if (value(root).rows() != 1 || value(root).cols() != 1) {
            throw ShapeError("backward: root must be scalar (1x1)");
        }
        Mat<S> one(1, 1);
        one(0, 0) = static_cast<S>(1);
        accumulate(root.idx_, one);
        for (int i = root.idx_; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.requires_grad && n.has_grad && n.back) {
                n.back(*this);
            }
        }
    }

  private:
    friend class Var<S>;

    struct Node {
        Mat<S> value;
        Mat<S> grad;
        bool has_grad = false;
        bool requires_grad = false;
        std::function<void(Tape&)> back;
    };

    const Mat<S>& node_value(int idx) const { return nodes_[static_cast<std::size_t>(idx)].value; }

    const Mat<S>& node_grad(int idx) const { return nodes_[static_cast<std::size_t>(idx)].grad; }

    void accumulate(int idx, const Mat<S>& g) {
        Node& n = nodes_[static_cast<std::size_t>(idx)];
        if (!n.requires_grad) {
            return;
        }
        if (!n.has_grad) {
            n.grad = g;
            n.has_grad = true;
        } else {
            n.grad += g;
        }
    }

    Var<S> push(Mat<S> v, bool requires_grad, std::function<void(Tape&)> back) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var<S>(this, static_cast<int>(nodes_.size()) - 1);
    }

    // Registers a node whose backward closure takes (tape, self, parent_a,
    // parent_b). parent_b = -1 for unary ops.
    Var<S> unary_or_binary(Mat<S> v, std::pair<int, int> parents,
                           std::function<void(Tape&, int, int, int)> back) {
        const int pa = parents.first;
        const int pb = parents.second;
        bool rg = nodes_[static_cast<std::size_t>(pa)].requires_grad
                  || (pb >= 0 && nodes_[static_cast<std::size_t>(pb)].requires_grad);
        if (!grad_enabled_ || !rg) {
            return push(std::move(v), false, {});
        }
        Var<S> out = push(std::move(v), true, {});
        const int self = out.idx_;
        nodes_[static_cast<std::size_t>(self)].back = [self, pa, pb, back](Tape& t) {
            back(t, self, pa, pb);
        };
        return out;
    }

    void check_same_shape(Var<S> a, Var<S> b, const char* op) const {
        if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
            throw ShapeError(std::string(op) + ": operand shapes differ");
        }
    }

    std::vector<Node> nodes_;
    bool grad_enabled_;
};

}  // namespace spiraldiff::ag
