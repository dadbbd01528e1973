#pragma once

#include "scenectx/diffcore/params.hpp"

#include <json.hpp>

#include <string>

namespace scenectx::diff {

// Checkpoint layout (all integers little-endian):
//   magic "SCKP", u32 version (=1)
//   u32 metadata length, metadata bytes (JSON text)
//   u32 record count
//   per record: u32 name length, name bytes, u32 rows, u32 cols,
//               u8 frozen flag, rows*cols IEEE-754 binary32 values (row-major)
inline constexpr char kCheckpointMagic[4] = {'S', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelState state;
  nlohmann::json meta = nlohmann::json::object();
};

void save_checkpoint(const std::string& path, const ModelState& state, const nlohmann::json& meta = {});
Checkpoint load_checkpoint(const std::string& path);

std::vector<unsigned char> encode_checkpoint(const ModelState& state, const nlohmann::json& meta);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes);

}  // namespace scenectx::diff
