#include "scenectx/diffcore/optimizer.hpp"

#include <cmath>

namespace scenectx::diff {

void Adam::step(ModelState& state, const std::map<std::string, MatF>& grads) {
  ++steps_;
  double norm_sq = 0.0;
  for (const auto& [name, g] : grads) {
    if (!state.at(name).frozen) norm_sq += g.template cast<double>().squaredNorm();
  }
  float clip = 1.0f;
  if (config_.clip_norm > 0.0) {
    const double norm = std::sqrt(norm_sq);
    if (norm > config_.clip_norm) clip = static_cast<float>(config_.clip_norm / norm);
  }
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  const auto b1 = static_cast<float>(config_.beta1);
  const auto b2 = static_cast<float>(config_.beta2);
  const auto step_size = static_cast<float>(config_.lr / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  const auto eps = static_cast<float>(config_.eps);

  for (const auto& [name, g_raw] : grads) {
    auto& p = state.at(name);
    if (p.frozen) continue;
    if (g_raw.rows() != p.value.rows() || g_raw.cols() != p.value.cols()) {
      throw ShapeError("Adam: gradient shape mismatch for " + name);
    }
    MatF g = g_raw * clip;
    auto [mit, m_new] = m_.try_emplace(name, MatF::Zero(g.rows(), g.cols()));
    auto [vit, v_new] = v_.try_emplace(name, MatF::Zero(g.rows(), g.cols()));
    auto& m = mit->second;
    auto& v = vit->second;
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
    p.value.array() -= step_size * m.array() / ((v.array() * inv_bc2).sqrt() + eps);
  }
}

}  // namespace scenectx::diff
