#include "scenectx/diffcore/checkpoint.hpp"

#include "scenectx/diffcore/binary_io.hpp"

#include <filesystem>
#include <fstream>
#include <limits>

namespace scenectx::io {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::string& path, const std::vector<unsigned char>& bytes) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, target);
}

}  // namespace scenectx::io

namespace scenectx::diff {

std::vector<unsigned char> encode_checkpoint(const ModelState& state, const nlohmann::json& meta) {
  io::ByteWriter w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put(kCheckpointVersion);
  w.put_string(meta.is_null() ? std::string("{}") : meta.dump());
  w.put(static_cast<std::uint32_t>(state.size()));
  for (const auto& p : state) {
    w.put_string(p.name);
    w.put(static_cast<std::uint32_t>(p.value.rows()));
    w.put(static_cast<std::uint32_t>(p.value.cols()));
    w.put(static_cast<std::uint8_t>(p.frozen ? 1 : 0));
    for (Index i = 0; i < p.value.size(); ++i) w.put_f32(p.value.data()[i]);
  }
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  io::ByteReader r(bytes.data(), bytes.size());
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw io::FormatError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw io::FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.meta = nlohmann::json::parse(r.get_string());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_string();
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    const bool frozen = r.get<std::uint8_t>() != 0;
    if (static_cast<std::uint64_t>(rows) * cols * 4 > r.remaining()) throw io::FormatError("truncated record " + name);
    MatF value(rows, cols);
    for (Index k = 0; k < value.size(); ++k) value.data()[k] = r.get_f32();
    ck.state.add(std::move(name), std::move(value), frozen);
  }
  if (r.remaining() != 0) throw io::FormatError("trailing bytes in checkpoint");
  return ck;
}

void save_checkpoint(const std::string& path, const ModelState& state, const nlohmann::json& meta) {
  io::write_file_atomic(path, encode_checkpoint(state, meta));
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace scenectx::diff
