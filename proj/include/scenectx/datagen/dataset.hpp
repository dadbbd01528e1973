#pragma once

#include "scenectx/diffcore/tensor.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace scenectx::data {

constexpr int kGlyphSize = 8;
constexpr int kSceneSize = 96;
constexpr int kGridCells = 3;
constexpr int kCellSize = kSceneSize / kGridCells;

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Glyph = std::array<std::uint8_t, kGlyphSize * kGlyphSize>;

/// Random 8x8 binary glyph per letter; the corruption glyph is all zeros.
class GlyphTable {
 public:
  explicit GlyphTable(std::uint64_t seed);

  /// Letter ids 0..25, or Vocab::kBlank for the corruption glyph.
  const Glyph& glyph(int id) const;
  std::uint64_t seed() const { return seed_; }
  /// Letter id (or kBlank) whose glyph equals the block, -1 if none.
  int match(const MatF& pixels, Index row, Index col) const;

 private:
  std::uint64_t seed_;
  std::array<Glyph, 26> letters_{};
  Glyph blank_{};
};

struct Stem {
  std::vector<int> letters;  // letter ids; the slot entry is ignored
  int slot = 0;
};

struct ContextSpec {
  int contexts = 4;
  int word_length = 4;
  std::vector<int> sigma;        // discriminating letter per context
  std::vector<int> tint;         // background level (0..255) per context
  std::vector<Stem> iv_stems;
  std::vector<Stem> oov_stems;
  bool words_only = false;       // drop the background tint cue
  std::uint64_t glyph_seed = 0;

  /// Random valid spec: sigma letters are excluded from non-slot positions
  /// so a crop without its slot letter carries no context information.
  static ContextSpec generate(int contexts, int iv_stems, int oov_stems, std::uint64_t seed, bool words_only = false);

  /// Throws GenerationError unless sigma is injective and every stem yields
  /// `contexts` distinct words that collide with no other stem's words.
  void validate() const;

  std::vector<int> completion(const Stem& stem, int context) const;
  std::string word(const Stem& stem, int context) const;

  nlohmann::json to_json() const;
  static ContextSpec from_json(const nlohmann::json& j);
};

enum class Split { train, val, eval };
enum class VocabFlag { iv, oov };

std::string to_string(Split s);
std::string to_string(VocabFlag v);
Split parse_split(const std::string& s);
VocabFlag parse_vocab(const std::string& s);

struct Box {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
  bool operator==(const Box&) const = default;
};

struct WordPlacement {
  Box box;
  std::string text;
  int stem = 0;  // index into the pool named by the scene's vocab flag
  bool corrupted = false;
};

struct SceneSample {
  std::uint64_t scene_id = 0;
  int context = 0;
  Split split = Split::train;
  VocabFlag vocab = VocabFlag::iv;
  std::vector<WordPlacement> words;
  int target = 0;       // index into words
  int masked_slot = 0;  // blanked character position of the target
  char hidden_letter = 'a';
  MatF pixels;          // kSceneSize x kSceneSize, values level/255
};

struct DatasetCounts {
  int train = 2000;
  int val = 200;
  int eval_iv = 300;
  int eval_oov = 300;
  nlohmann::json to_json() const;
  static DatasetCounts from_json(const nlohmann::json& j);
};

struct Dataset {
  ContextSpec spec;
  DatasetCounts counts;
  std::uint64_t seed = 0;
  std::vector<SceneSample> scenes;

  std::vector<const SceneSample*> select(std::optional<Split> split, std::optional<VocabFlag> vocab = {}) const;
};

/// Deterministic per seed; each scene is a pure function of (seed, split, index).
Dataset generate_dataset(const ContextSpec& spec, const DatasetCounts& counts, std::uint64_t seed);

/// One scene; exposed for partitioned generation.
SceneSample generate_scene(const ContextSpec& spec, const GlyphTable& glyphs, Split split, VocabFlag vocab,
                           std::uint64_t scene_id, std::uint64_t seed, std::uint64_t index);

/// Scene region at box; throws std::out_of_range if the box leaves the scene.
MatF crop(const MatF& scene, const Box& box);

/// Renders a glyph-id sequence (letters or kBlank) into an 8 x (8*len) image.
MatF render_word(const GlyphTable& glyphs, const std::vector<int>& ids);

// On-disk layout: <dir>/spec.json, <dir>/manifest.jsonl, <dir>/images/<scene_id>.pgm
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset read_dataset(const std::string& dir);
/// SHA-256 over spec, manifest and image files in manifest order.
std::string dataset_checksum(const std::string& dir);

void write_pgm(const std::string& path, const MatF& pixels);
MatF read_pgm(const std::string& path);

}  // namespace scenectx::data
