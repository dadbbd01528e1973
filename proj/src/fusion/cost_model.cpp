#include "scenectx/fusion/cost_model.hpp"

namespace scenectx::fusion {

namespace {
std::uint64_t linear_params(std::uint64_t in, std::uint64_t out) { return in * out + out; }
}  // namespace

std::uint64_t count_params(const FusionConfig& config) {
  config.validate();
  const auto dl = static_cast<std::uint64_t>(config.d_local);
  const auto dg = static_cast<std::uint64_t>(config.d_global);
  std::uint64_t n = linear_params(dg, dl);
  if (config.mechanism == Mechanism::gated) return n + linear_params(2 * dl, dl);

  const auto h = static_cast<std::uint64_t>(config.hidden_size);
  const auto im = static_cast<std::uint64_t>(config.intermediate_size);
  n += 2 * linear_params(dl, h);
  const std::uint64_t per_layer = 4 * linear_params(h, h) - h + linear_params(h, im) + linear_params(im, h) + 2 * (2 * h);
  n += static_cast<std::uint64_t>(config.layers) * per_layer;
  n += linear_params(h, dl);
  return n;
}

std::uint64_t FlopBreakdown::total_macs() const {
  return global_projection + stream_projection + query_projection + kv_projection + scores + weighted_sum +
         output_projection + feed_forward + final_projection + gate_logits + gate_mix + tanh_blend;
}

FlopBreakdown estimate_flops(const FusionConfig& config, std::uint64_t n_local, std::uint64_t n_global,
                             std::uint64_t d) {
  config.validate();
  const auto dg = static_cast<std::uint64_t>(config.d_global);
  FlopBreakdown f;
  f.tanh_blend = 2 * n_local * d;
  if (config.mechanism == Mechanism::gated) {
    f.global_projection = dg * d;
    f.gate_logits = n_local * 2 * d * d;
    f.gate_mix = 2 * n_local * d;
    return f;
  }
  const auto h = static_cast<std::uint64_t>(config.hidden_size);
  const auto im = static_cast<std::uint64_t>(config.intermediate_size);
  const auto L = static_cast<std::uint64_t>(config.layers);
  f.global_projection = n_global * dg * d;
  f.stream_projection = (n_local + n_global) * d * h;
  f.query_projection = L * n_local * h * h;
  f.kv_projection = L * 2 * n_global * h * h;
  f.scores = L * n_local * n_global * h;
  f.weighted_sum = L * n_local * n_global * h;
  f.output_projection = L * n_local * h * h;
  f.feed_forward = L * 2 * n_local * h * im;
  f.final_projection = n_local * h * d;
  return f;
}

std::uint64_t attention_flops_per_layer(std::uint64_t n_local, std::uint64_t n_global, std::uint64_t hidden) {
  return 2 * (2 * n_local * n_global * hidden);
}

}  // namespace scenectx::fusion
