#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace spiraldiff {

// Dense row-major matrices. The library is templated on the scalar type:
// float for production training/sampling, double for the numerical oracles
// and gradient checks that require 64-bit arithmetic.
template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic, Eigen::RowMajor>;

using Matf = Mat<float>;
using Matd = Mat<double>;

// Invalid configuration values (rejected before any computation starts).
class ConfigError : public std::invalid_argument {
  public:
    explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Shape/range violations detected at call time.
class ShapeError : public std::invalid_argument {
  public:
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

}  // namespace spiraldiff
