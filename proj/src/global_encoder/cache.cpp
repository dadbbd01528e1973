#include "scenectx/global_encoder/cache.hpp"

#include "scenectx/diffcore/binary_io.hpp"

#include <cstring>
#include <filesystem>
#include <iostream>

namespace scenectx::encoder {

namespace {
constexpr char kMagic[4] = {'C', 'L', 'T', 'C'};
constexpr std::uint8_t kVersion = 1;
constexpr std::size_t kPreamble = 5;  // magic + version, outside the CRC
}  // namespace

EmbeddingCache::EmbeddingCache(std::string path, Index dim, PoolKernel k, util::Digest256 fingerprint)
    : path_(std::move(path)), dim_(dim), k_(k), fingerprint_(fingerprint) {
  if (dim_ <= 0) throw ConfigError("cache feature width must be positive");
  if (!path_.empty() && std::filesystem::exists(path_)) load();
}

void EmbeddingCache::warn(const std::string& msg) {
  warnings_.push_back(msg);
  std::cerr << "warning: " << msg << '\n';
}

bool EmbeddingCache::rekey(PoolKernel k, const util::Digest256& fingerprint) {
  if (k == k_ && fingerprint == fingerprint_) return false;
  if (!entries_.empty()) {
    warn("embedding cache key changed (k or encoder fingerprint); dropping " + std::to_string(entries_.size()) +
         " stale entries");
  }
  entries_.clear();
  k_ = k;
  fingerprint_ = fingerprint;
  return true;
}

std::optional<fusion::FeatureSequence> EmbeddingCache::get(std::uint64_t scene_id, PoolKernel k,
                                                           const util::Digest256& fingerprint) {
  if (rekey(k, fingerprint)) {
    ++misses_;
    return std::nullopt;
  }
  auto it = entries_.find(scene_id);
  if (it == entries_.end()) {
    ++misses_;
    return std::nullopt;
  }
  ++hits_;
  return fusion::FeatureSequence(it->second, fusion::Role::global);
}

void EmbeddingCache::put(std::uint64_t scene_id, PoolKernel k, const util::Digest256& fingerprint,
                         const fusion::FeatureSequence& features) {
  if (features.dim() != dim_) {
    throw ShapeError("cache stores width " + std::to_string(dim_) + ", got " + std::to_string(features.dim()));
  }
  rekey(k, fingerprint);
  entries_[scene_id] = features.tokens;
}

std::vector<unsigned char> EmbeddingCache::encode() const {
  io::ByteWriter w;
  w.put_bytes(kMagic, sizeof(kMagic));
  w.put(kVersion);
  w.put(static_cast<std::uint32_t>(dim_));
  w.put(k_.code());
  w.put_bytes(fingerprint_.data(), fingerprint_.size());
  w.put(static_cast<std::uint64_t>(entries_.size()));
  for (const auto& [id, tokens] : entries_) {
    w.put(id);
    w.put(static_cast<std::uint32_t>(tokens.rows()));
    for (Index i = 0; i < tokens.size(); ++i) w.put_f32(tokens.data()[i]);
  }
  const auto& bytes = w.bytes();
  w.put(util::crc32(bytes.data() + kPreamble, bytes.size() - kPreamble));
  return w.bytes();
}

void EmbeddingCache::save() const {
  if (path_.empty()) return;
  const auto parent = std::filesystem::path(path_).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  io::write_file_atomic(path_, encode());
}

void EmbeddingCache::load() {
  const auto bytes = io::read_file(path_);
  try {
    if (bytes.size() < kPreamble + 4 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
      throw io::FormatError("bad magic");
    }
    if (bytes[4] != kVersion) throw io::FormatError("unsupported version " + std::to_string(bytes[4]));
    const std::size_t body = bytes.size() - 4;
    io::ByteReader crc_reader(bytes.data() + body, 4);
    if (crc_reader.get<std::uint32_t>() != util::crc32(bytes.data() + kPreamble, body - kPreamble)) {
      throw io::FormatError("checksum mismatch");
    }
    io::ByteReader r(bytes.data() + kPreamble, body - kPreamble);
    const auto d = r.get<std::uint32_t>();
    const auto k = PoolKernel::from_code(r.get<std::uint32_t>());
    util::Digest256 fp{};
    r.get_bytes(fp.data(), fp.size());
    const auto count = r.get<std::uint64_t>();
    std::map<std::uint64_t, MatF> entries;
    for (std::uint64_t i = 0; i < count; ++i) {
      const auto id = r.get<std::uint64_t>();
      const auto n = r.get<std::uint32_t>();
      MatF tokens(static_cast<Index>(n), static_cast<Index>(d));
      for (Index j = 0; j < tokens.size(); ++j) tokens.data()[j] = r.get_f32();
      entries[id] = std::move(tokens);
    }
    if (r.remaining() != 0) throw io::FormatError("trailing bytes");
    if (static_cast<Index>(d) != dim_ || !(k == k_) || fp != fingerprint_) {
      warn("embedding cache " + path_ + " was built for another encoder or pooling kernel; rebuilding");
      return;
    }
    entries_ = std::move(entries);
  } catch (const std::exception& e) {
    warn("embedding cache " + path_ + " is corrupted (" + e.what() + "); rebuilding from scratch");
    entries_.clear();
  }
}

fusion::FeatureSequence FeatureSource::get(const data::SceneSample& scene) {
  if (cache_ != nullptr) {
    if (auto hit = cache_->get(scene.scene_id, k_, encoder_->fingerprint())) return std::move(*hit);
  }
  auto features = pool_features(encoder_->encode(scene.pixels), k_);
  if (cache_ != nullptr) cache_->put(scene.scene_id, k_, encoder_->fingerprint(), features);
  return features;
}

}  // namespace scenectx::encoder
