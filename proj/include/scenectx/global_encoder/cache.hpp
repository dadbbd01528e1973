#pragma once

#include "scenectx/fusion/fusion.hpp"
#include "scenectx/global_encoder/pooling.hpp"
#include "scenectx/util/digest.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace scenectx::encoder {

/// Pooled global features keyed by (scene_id, k, encoder fingerprint).
///
/// File layout, little-endian: "CLTC", version byte 1, d (u32), k code
/// (u32, 0 = infinite), fingerprint (32 bytes), record count (u64), then per
/// record scene_id (u64), token count (u32), token data (f32, row-major),
/// and finally a CRC32 over everything after the version byte.
class EmbeddingCache {
 public:
  /// In-memory cache when path is empty; otherwise loads an existing file.
  /// A corrupted file is discarded with a warning; a file written for a
  /// different (d, k, fingerprint) is treated as stale and dropped.
  EmbeddingCache(std::string path, Index dim, PoolKernel k, util::Digest256 fingerprint);

  /// A key mismatch counts as a miss and invalidates all stored entries.
  std::optional<fusion::FeatureSequence> get(std::uint64_t scene_id, PoolKernel k, const util::Digest256& fingerprint);
  void put(std::uint64_t scene_id, PoolKernel k, const util::Digest256& fingerprint,
           const fusion::FeatureSequence& features);

  void save() const;

  std::size_t size() const { return entries_.size(); }
  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }
  void reset_counters() { hits_ = misses_ = 0; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  PoolKernel kernel() const { return k_; }
  const util::Digest256& fingerprint() const { return fingerprint_; }

  std::vector<unsigned char> encode() const;

 private:
  bool rekey(PoolKernel k, const util::Digest256& fingerprint);
  void load();
  void warn(const std::string& msg);

  std::string path_;
  Index dim_;
  PoolKernel k_;
  util::Digest256 fingerprint_;
  std::map<std::uint64_t, MatF> entries_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
  std::vector<std::string> warnings_;
};

/// Pooled global features per scene, read through an optional cache. Misses
/// run the frozen encoder on the single scene and store the pooled result.
class FeatureSource {
 public:
  FeatureSource(const SceneEncoder& encoder, PoolKernel k, EmbeddingCache* cache = nullptr)
      : encoder_(&encoder), k_(k), cache_(cache) {}

  fusion::FeatureSequence get(const data::SceneSample& scene);

  const SceneEncoder& encoder() const { return *encoder_; }
  PoolKernel kernel() const { return k_; }
  EmbeddingCache* cache() const { return cache_; }

 private:
  const SceneEncoder* encoder_;
  PoolKernel k_;
  EmbeddingCache* cache_;
};

}  // namespace scenectx::encoder
