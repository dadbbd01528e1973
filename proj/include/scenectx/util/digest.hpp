#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace scenectx::util {

using Digest256 = std::array<std::uint8_t, 32>;

/// Incremental SHA-256.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t size);
  void update(const std::string& s) { update(s.data(), s.size()); }
  Digest256 finish();

 private:
  void* ctx_;
};

Digest256 sha256(const void* data, std::size_t size);
std::string to_hex(const Digest256& d);
std::string sha256_file(const std::string& path);

std::uint32_t crc32(const unsigned char* data, std::size_t size);

}  // namespace scenectx::util
