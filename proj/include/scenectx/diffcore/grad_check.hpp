#pragma once

#include "scenectx/diffcore/graph.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <string>

namespace scenectx::diff {

/// A scalar-valued computation over the parameters bound in the graph.
/// Inputs are captured by the callable.
template <typename T>
using Computation = std::function<Var<T>(Graph<T>&)>;

template <typename T>
struct ForwardResult {
  Mat<T> output;
  std::map<std::string, Mat<T>> gradients;  // non-frozen parameters only
};

/// Runs the computation once and backpropagates. Throws NumericError (naming
/// the op) if any intermediate is non-finite.
template <typename T>
ForwardResult<T> forward_with_grads(const Computation<T>& computation, const ParameterSet<T>& params);

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  /// Entries whose absolute error is at most atol pass regardless of tol.
  double atol = 0.0;
  /// Entries sampled per parameter tensor; 0 checks every entry.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradReport {
  std::map<std::string, double> max_rel_error;  // per parameter
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t entries_checked = 0;
  std::size_t failures = 0;
  double eps = 0.0;
  double tol = 0.0;
  bool pass = false;
  bool non_finite = false;
};

/// Elementwise relative error with the 1e-8 denominator floor.
double relative_error(double analytic, double numeric);

/// Central differences (f(x+eps) - f(x-eps)) / (2 eps) against the supplied
/// analytic gradients. The computation must return a 1x1 value.
GradReport compare_gradients(const Computation<double>& computation, const ParameterSet<double>& params,
                             const std::map<std::string, MatD>& analytic, const GradCheckOptions& options = {});

/// forward_with_grads followed by compare_gradients. eps must lie in [1e-6, 1e-4].
GradReport grad_check(const Computation<double>& computation, const ParameterSet<double>& params,
                      const GradCheckOptions& options = {});

}  // namespace scenectx::diff
