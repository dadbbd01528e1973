#include "scenectx/diffcore/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace scenectx::diff {

template <typename T>
ForwardResult<T> forward_with_grads(const Computation<T>& computation, const ParameterSet<T>& params) {
  Graph<T> g(&params);
  Var<T> out = computation(g);
  ForwardResult<T> result;
  result.output = out.value();
  if (out.rows() == 1 && out.cols() == 1) {
    g.backward(out);
    result.gradients = g.parameter_grads();
  }
  return result;
}

template ForwardResult<float> forward_with_grads(const Computation<float>&, const ParameterSet<float>&);
template ForwardResult<double> forward_with_grads(const Computation<double>&, const ParameterSet<double>&);

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double evaluate(const Computation<double>& computation, const ParameterSet<double>& params) {
  Graph<double> g(&params);
  g.set_grad_enabled(false);
  Var<double> out = computation(g);
  if (out.rows() != 1 || out.cols() != 1) throw ShapeError("grad_check: computation must return 1x1");
  return out.value()(0, 0);
}

}  // namespace

GradReport compare_gradients(const Computation<double>& computation, const ParameterSet<double>& params,
                             const std::map<std::string, MatD>& analytic, const GradCheckOptions& options) {
  if (!(options.eps >= 1e-6 && options.eps <= 1e-4)) {
    throw std::invalid_argument("grad_check: eps must lie in [1e-6, 1e-4]");
  }
  GradReport report;
  report.eps = options.eps;
  report.tol = options.tol;
  std::mt19937_64 rng(options.seed);
  ParameterSet<double> work = params;

  for (auto& p : work) {
    if (p.frozen) continue;
    auto it = analytic.find(p.name);
    if (it == analytic.end()) {
      throw std::invalid_argument("grad_check: no analytic gradient for " + p.name);
    }
    const MatD& a = it->second;
    const auto n = static_cast<std::size_t>(p.value.size());
    std::vector<std::size_t> entries(n);
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (options.max_entries_per_param != 0 && n > options.max_entries_per_param) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries_per_param);
      std::sort(entries.begin(), entries.end());
    }
    double worst = 0.0;
    for (std::size_t e : entries) {
      double* x = p.value.data() + e;
      const double saved = *x;
      *x = saved + options.eps;
      const double up = evaluate(computation, work);
      *x = saved - options.eps;
      const double down = evaluate(computation, work);
      *x = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double an = a.data()[e];
      double err = relative_error(an, numeric);
      if (!std::isfinite(numeric) || !std::isfinite(an) || !std::isfinite(err)) {
        report.non_finite = true;
        err = std::numeric_limits<double>::infinity();
      }
      worst = std::max(worst, err);
      if (!(err < options.tol) && !(std::abs(an - numeric) <= options.atol)) ++report.failures;
      ++report.entries_checked;
    }
    report.max_rel_error[p.name] = worst;
    if (report.worst_parameter.empty() || worst > report.max_relative_error) {
      report.max_relative_error = worst;
      report.worst_parameter = p.name;
    }
  }
  report.pass = !report.non_finite && report.failures == 0;
  return report;
}

GradReport grad_check(const Computation<double>& computation, const ParameterSet<double>& params,
                      const GradCheckOptions& options) {
  auto fwd = forward_with_grads(computation, params);
  if (fwd.output.rows() != 1 || fwd.output.cols() != 1) {
    throw ShapeError("grad_check: computation must return 1x1");
  }
  return compare_gradients(computation, params, fwd.gradients, options);
}

}  // namespace scenectx::diff
