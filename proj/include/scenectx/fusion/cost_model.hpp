#pragma once

#include "scenectx/fusion/fusion.hpp"

#include <cstdint>

namespace scenectx::fusion {

/// Learnable scalars of a fusion attachment: global projection plus the
/// mixing block. The gate scalar alpha is not included.
std::uint64_t count_params(const FusionConfig& config);

/// Multiply-add counts of a fusion attachment, by term. Only products are
/// counted (matrix products, Hadamard mixes and the gate blend); biases,
/// normalization, softmax and activations are excluded. One multiply-add is
/// two FLOPs.
struct FlopBreakdown {
  std::uint64_t global_projection = 0;  // N_g * d_global * d
  std::uint64_t stream_projection = 0;  // MH-CA: (N_l + N_g) * d * hidden
  std::uint64_t query_projection = 0;   // per layer N_l * hidden^2
  std::uint64_t kv_projection = 0;      // per layer 2 * N_g * hidden^2
  std::uint64_t scores = 0;             // per layer N_l * N_g * hidden
  std::uint64_t weighted_sum = 0;       // per layer N_l * N_g * hidden
  std::uint64_t output_projection = 0;  // per layer N_l * hidden^2
  std::uint64_t feed_forward = 0;       // per layer 2 * N_l * hidden * intermediate
  std::uint64_t final_projection = 0;   // MH-CA: N_l * hidden * d
  std::uint64_t gate_logits = 0;        // gated: N_l * 2d * d
  std::uint64_t gate_mix = 0;           // gated: 2 * N_l * d
  std::uint64_t tanh_blend = 0;         // 2 * N_l * d

  std::uint64_t total_macs() const;
  std::uint64_t total_flops() const { return 2 * total_macs(); }
};

/// Closed-form cost of one fusion invocation over N_local query tokens and
/// N_global image tokens at local width d. The gated mechanism always
/// consumes a single global token, so its cost ignores n_global.
FlopBreakdown estimate_flops(const FusionConfig& config, std::uint64_t n_local, std::uint64_t n_global,
                             std::uint64_t d);

/// FLOPs of the score matrix plus the attention-weighted sum of one
/// cross-attention layer: 2 * (2 * N_l * N_g * hidden).
std::uint64_t attention_flops_per_layer(std::uint64_t n_local, std::uint64_t n_global, std::uint64_t hidden);

}  // namespace scenectx::fusion
