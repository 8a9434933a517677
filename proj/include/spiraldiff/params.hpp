#pragma once

#include "spiraldiff/autograd.hpp"
#include "spiraldiff/core.hpp"
#include "spiraldiff/rng.hpp"

#include <cstddef>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace spiraldiff {

// Named parameter tensors in a stable registration order. The order drives
// optimizer iteration and checkpoint layout, so runs are reproducible.
template <class S>
struct ParameterSet {
    struct Entry {
        std::string name;
        Mat<S> value;
        Mat<S> grad;
    };

    std::vector<Entry> entries;
    std::unordered_map<std::string, int> index;

    int add(const std::string& name, int rows, int cols) {
        if (index.count(name)) {
            throw ConfigError("ParameterSet: duplicate parameter " + name);
        }
        Entry e;
        e.name = name;
        e.value = Mat<S>::Zero(rows, cols);
        e.grad = Mat<S>::Zero(rows, cols);
        index[name] = static_cast<int>(entries.size());
        entries.push_back(std::move(e));
        return static_cast<int>(entries.size()) - 1;
    }

    Entry& at(int i) { return entries[static_cast<std::size_t>(i)]; }
    const Entry& at(int i) const { return entries[static_cast<std::size_t>(i)]; }

    int find(const std::string& name) const {
        auto it = index.find(name);
        return it == index.end() ? -1 : it->second;
    }

    Entry& named(const std::string& name) {
        const int i = find(name);
        if (i < 0) {
            throw ConfigError("ParameterSet: unknown parameter " + name);
        }
        return at(i);
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& e : entries) {
            n += static_cast<std::size_t>(e.value.size());
        }
        return n;
    }

    void zero_grads() {
        for (auto& e : entries) {
            e.grad.setZero();
        }
    }
};

// Binds every parameter to a tape as a leaf once per episode; gradients are
// harvested back after the backward pass.
template <class S>
class BoundParams {
  public:
    BoundParams(ag::Tape<S>& tape, ParameterSet<S>& params) : tape_(&tape), params_(&params) {
        vars_.reserve(params.entries.size());
        for (const auto& e : params.entries) {
            vars_.push_back(tape.leaf(e.value));
        }
    }

    ag::Var<S> operator[](int idx) const { return vars_[static_cast<std::size_t>(idx)]; }

    // Copies accumulated tape gradients into the parameter set.
    void harvest() {
        for (std::size_t i = 0; i < vars_.size(); ++i) {
            params_->entries[i].grad = tape_->grad(vars_[i]);
        }
    }

  private:
    ag::Tape<S>* tape_;
    ParameterSet<S>* params_;
    std::vector<ag::Var<S>> vars_;
};

namespace init {

template <class S>
void gaussian(Mat<S>& m, Rng& rng, double std_dev) {
    for (int i = 0; i < m.rows(); ++i) {
        for (int j = 0; j < m.cols(); ++j) {
            m(i, j) = static_cast<S>(rng.gaussian() * std_dev);
        }
    }
}

template <class S>
void identity_block(Mat<S>& m) {
    m.setZero();
    const int n = std::min(m.rows(), m.cols());
    for (int i = 0; i < n; ++i) {
        m(i, i) = static_cast<S>(1);
    }
}

}  // namespace init

}  // namespace spiraldiff
