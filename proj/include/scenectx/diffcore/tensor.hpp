#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace scenectx {

// Row-major dense matrix. Sequences are stored one token per row.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using Index = Eigen::Index;

/// Raised when tensor shapes do not agree with an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid configurations (bad pooling kernel, wrong integration
/// point for an architecture, heads not dividing the hidden size, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an op produces a NaN or infinity. Carries the op name.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(std::string op)
      : std::runtime_error("non-finite value produced by op '" + op + "'"), op_(std::move(op)) {}
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

inline std::string shape_str(Index rows, Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename T>
std::string shape_str(const Mat<T>& m) {
  return shape_str(m.rows(), m.cols());
}

}  // namespace scenectx
