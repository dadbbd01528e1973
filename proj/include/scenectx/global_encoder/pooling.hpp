#pragma once

#include "scenectx/fusion/fusion.hpp"
#include "scenectx/global_encoder/encoder.hpp"

#include <cstdint>
#include <string>

namespace scenectx::encoder {

/// 2D average-pooling factor over the patch grid; infinite keeps only the
/// class token.
class PoolKernel {
 public:
  static PoolKernel infinite() { return PoolKernel(0); }
  static PoolKernel of(int k);
  /// "inf" or a positive integer.
  static PoolKernel parse(const std::string& s);
  /// Cache-file code: 0 for infinite, otherwise k.
  static PoolKernel from_code(std::uint32_t code);

  bool is_infinite() const { return k_ == 0; }
  int k() const;
  std::uint32_t code() const { return static_cast<std::uint32_t>(k_); }
  std::string str() const { return is_infinite() ? "inf" : std::to_string(k_); }
  bool operator==(const PoolKernel&) const = default;

 private:
  explicit PoolKernel(int k) : k_(k) {}
  int k_;
};

/// Output length 1 + (H/k)(W/k), or 1 for infinite. Throws ConfigError if
/// k does not divide both grid dimensions.
Index pooled_length(Index grid_h, Index grid_w, PoolKernel k);

/// Row 0 copied verbatim; patch rows average-pooled with kernel = stride = k.
fusion::FeatureSequence pool_features(const GlobalFeatures& f, PoolKernel k);

}  // namespace scenectx::encoder
