#pragma once

#include "scenectx/diffcore/params.hpp"

#include <map>
#include <stdexcept>
#include <string>

namespace scenectx::diff {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 5.0;
};

/// Adaptive moment estimation. Frozen parameters are never touched, even if a
/// gradient for them is supplied.
class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}

  void step(ModelState& state, const std::map<std::string, MatF>& grads);

  std::size_t steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::size_t steps_ = 0;
  std::map<std::string, MatF> m_;
  std::map<std::string, MatF> v_;
};

/// Training diverged; carries the parameters from before the failing step.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, ModelState last_stable)
      : std::runtime_error(what), last_stable_(std::move(last_stable)) {}
  const ModelState& last_stable() const { return last_stable_; }

 private:
  ModelState last_stable_;
};

}  // namespace scenectx::diff
