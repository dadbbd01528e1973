#include "scenectx/datagen/dataset.hpp"

#include "scenectx/recognizers/vocab.hpp"
#include "scenectx/util/digest.hpp"
#include "scenectx/util/seed.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

namespace scenectx::data {

namespace fs = std::filesystem;
using nlohmann::json;
using util::mix_seed;

namespace {

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

constexpr int kMinGlyphDistance = 12;

}  // namespace

GlyphTable::GlyphTable(std::uint64_t seed) : seed_(seed) {
  std::mt19937_64 rng(mix_seed(seed, 0x61));
  std::vector<std::uint64_t> bits;
  while (bits.size() < letters_.size()) {
    const std::uint64_t cand = rng();
    const int ones = std::popcount(cand);
    if (ones < 16 || ones > 48) continue;
    bool ok = true;
    for (auto b : bits) ok = ok && std::popcount(b ^ cand) >= kMinGlyphDistance;
    if (ok) bits.push_back(cand);
  }
  for (std::size_t i = 0; i < letters_.size(); ++i) {
    for (int p = 0; p < kGlyphSize * kGlyphSize; ++p) letters_[i][p] = (bits[i] >> p) & 1u;
  }
}

const Glyph& GlyphTable::glyph(int id) const {
  if (id == Vocab::kBlank) return blank_;
  if (id < 0 || id >= Vocab::kLetters) throw std::out_of_range("glyph id " + std::to_string(id));
  return letters_[static_cast<std::size_t>(id)];
}

int GlyphTable::match(const MatF& pixels, Index row, Index col) const {
  auto equal = [&](const Glyph& gl) {
    for (int y = 0; y < kGlyphSize; ++y) {
      for (int x = 0; x < kGlyphSize; ++x) {
        if (pixels(row + y, col + x) != static_cast<float>(gl[y * kGlyphSize + x])) return false;
      }
    }
    return true;
  };
  if (equal(blank_)) return Vocab::kBlank;
  for (int i = 0; i < Vocab::kLetters; ++i) {
    if (equal(letters_[static_cast<std::size_t>(i)])) return i;
  }
  return -1;
}

ContextSpec ContextSpec::generate(int contexts, int iv_stems, int oov_stems, std::uint64_t seed, bool words_only) {
  if (contexts < 1 || contexts > Vocab::kLetters / 2) throw GenerationError("context count out of range");
  ContextSpec spec;
  spec.contexts = contexts;
  spec.words_only = words_only;
  spec.glyph_seed = mix_seed(seed, 0x67);
  std::mt19937_64 rng(mix_seed(seed, 0x73));

  std::vector<int> letters(Vocab::kLetters);
  for (int i = 0; i < Vocab::kLetters; ++i) letters[static_cast<std::size_t>(i)] = i;
  std::shuffle(letters.begin(), letters.end(), rng);
  spec.sigma.assign(letters.begin(), letters.begin() + contexts);
  const std::vector<int> plain(letters.begin() + contexts, letters.end());
  for (int c = 0; c < contexts; ++c) spec.tint.push_back(16 * (c + 1));

  std::set<std::pair<std::vector<int>, int>> seen;
  auto draw = [&](std::vector<Stem>& pool, int n) {
    while (static_cast<int>(pool.size()) < n) {
      Stem s;
      s.slot = uniform_int(rng, 0, spec.word_length - 1);
      s.letters.resize(static_cast<std::size_t>(spec.word_length));
      for (int i = 0; i < spec.word_length; ++i) {
        s.letters[static_cast<std::size_t>(i)] =
            i == s.slot ? -1 : plain[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(plain.size()) - 1))];
      }
      if (seen.insert({s.letters, s.slot}).second) pool.push_back(std::move(s));
    }
  };
  draw(spec.iv_stems, iv_stems);
  draw(spec.oov_stems, oov_stems);
  spec.validate();
  return spec;
}

void ContextSpec::validate() const {
  if (contexts < 1) throw GenerationError("need at least one context");
  if (word_length < 1 || word_length * kGlyphSize > kCellSize) {
    throw GenerationError("word length must fit a grid cell (1.." + std::to_string(kCellSize / kGlyphSize) + ")");
  }
  if (static_cast<int>(sigma.size()) != contexts || static_cast<int>(tint.size()) != contexts) {
    throw GenerationError("sigma and tint need one entry per context");
  }
  std::set<int> distinct;
  for (int s : sigma) {
    if (s < 0 || s >= Vocab::kLetters) throw GenerationError("sigma entry is not a letter");
    distinct.insert(s);
  }
  if (static_cast<int>(distinct.size()) != contexts) throw GenerationError("sigma is not injective over contexts");
  for (int t : tint) {
    if (t < 0 || t > 255) throw GenerationError("tint level outside 0..255");
  }
  std::set<std::string> words;
  std::size_t expected = 0;
  for (const auto* pool : {&iv_stems, &oov_stems}) {
    for (const auto& stem : *pool) {
      if (static_cast<int>(stem.letters.size()) != word_length || stem.slot < 0 || stem.slot >= word_length) {
        throw GenerationError("malformed stem");
      }
      for (int i = 0; i < word_length; ++i) {
        const int l = stem.letters[static_cast<std::size_t>(i)];
        if (i != stem.slot && (l < 0 || l >= Vocab::kLetters)) throw GenerationError("stem letter is not a letter");
      }
      for (int c = 0; c < contexts; ++c) words.insert(word(stem, c));
      expected += static_cast<std::size_t>(contexts);
    }
  }
  if (words.size() != expected) throw GenerationError("stem completions are not pairwise distinct words");
}

std::vector<int> ContextSpec::completion(const Stem& stem, int context) const {
  std::vector<int> ids = stem.letters;
  ids[static_cast<std::size_t>(stem.slot)] = sigma.at(static_cast<std::size_t>(context));
  return ids;
}

std::string ContextSpec::word(const Stem& stem, int context) const {
  std::string w;
  for (int id : completion(stem, context)) w.push_back(Vocab::to_char(id));
  return w;
}

json ContextSpec::to_json() const {
  auto stems = [](const std::vector<Stem>& pool) {
    json a = json::array();
    for (const auto& s : pool) {
      std::string pattern;
      for (std::size_t i = 0; i < s.letters.size(); ++i) {
        pattern.push_back(static_cast<int>(i) == s.slot ? '_' : Vocab::to_char(s.letters[i]));
      }
      a.push_back(pattern);
    }
    return a;
  };
  std::string sig;
  for (int s : sigma) sig.push_back(Vocab::to_char(s));
  return {{"contexts", contexts},     {"word_length", word_length}, {"sigma", sig},
          {"tint", tint},             {"words_only", words_only},   {"glyph_seed", glyph_seed},
          {"iv_stems", stems(iv_stems)}, {"oov_stems", stems(oov_stems)}};
}

ContextSpec ContextSpec::from_json(const json& j) {
  ContextSpec spec;
  spec.contexts = j.at("contexts").get<int>();
  spec.word_length = j.at("word_length").get<int>();
  spec.sigma = Vocab::encode(j.at("sigma").get<std::string>());
  spec.tint = j.at("tint").get<std::vector<int>>();
  spec.words_only = j.at("words_only").get<bool>();
  spec.glyph_seed = j.at("glyph_seed").get<std::uint64_t>();
  auto stems = [](const json& a) {
    std::vector<Stem> pool;
    for (const auto& p : a) {
      const auto pattern = p.get<std::string>();
      Stem s;
      s.slot = -1;
      for (std::size_t i = 0; i < pattern.size(); ++i) {
        if (pattern[i] == '_') {
          if (s.slot >= 0) throw GenerationError("stem pattern with two slots: " + pattern);
          s.slot = static_cast<int>(i);
          s.letters.push_back(-1);
        } else {
          s.letters.push_back(Vocab::from_char(pattern[i]));
        }
      }
      if (s.slot < 0) throw GenerationError("stem pattern without slot: " + pattern);
      pool.push_back(std::move(s));
    }
    return pool;
  };
  spec.iv_stems = stems(j.at("iv_stems"));
  spec.oov_stems = stems(j.at("oov_stems"));
  spec.validate();
  return spec;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::eval: return "eval";
  }
  return "?";
}

std::string to_string(VocabFlag v) { return v == VocabFlag::iv ? "iv" : "oov"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "eval") return Split::eval;
  throw std::invalid_argument("unknown split: " + s);
}

VocabFlag parse_vocab(const std::string& s) {
  if (s == "iv") return VocabFlag::iv;
  if (s == "oov") return VocabFlag::oov;
  throw std::invalid_argument("unknown vocab flag: " + s);
}

json DatasetCounts::to_json() const {
  return {{"train", train}, {"val", val}, {"eval_iv", eval_iv}, {"eval_oov", eval_oov}};
}

DatasetCounts DatasetCounts::from_json(const json& j) {
  DatasetCounts c;
  c.train = j.at("train").get<int>();
  c.val = j.at("val").get<int>();
  c.eval_iv = j.at("eval_iv").get<int>();
  c.eval_oov = j.at("eval_oov").get<int>();
  return c;
}

std::vector<const SceneSample*> Dataset::select(std::optional<Split> split, std::optional<VocabFlag> vocab) const {
  std::vector<const SceneSample*> out;
  for (const auto& s : scenes) {
    if (split && s.split != *split) continue;
    if (vocab && s.vocab != *vocab) continue;
    out.push_back(&s);
  }
  return out;
}

MatF render_word(const GlyphTable& glyphs, const std::vector<int>& ids) {
  MatF img(kGlyphSize, kGlyphSize * static_cast<Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Glyph& gl = glyphs.glyph(ids[i]);
    for (int y = 0; y < kGlyphSize; ++y) {
      for (int x = 0; x < kGlyphSize; ++x) {
        img(y, static_cast<Index>(i) * kGlyphSize + x) = static_cast<float>(gl[y * kGlyphSize + x]);
      }
    }
  }
  return img;
}

SceneSample generate_scene(const ContextSpec& spec, const GlyphTable& glyphs, Split split, VocabFlag vocab,
                           std::uint64_t scene_id, std::uint64_t seed, std::uint64_t index) {
  const auto stream = static_cast<std::uint64_t>(static_cast<int>(split) * 2 + static_cast<int>(vocab));
  std::mt19937_64 rng(mix_seed(mix_seed(seed, stream), index));
  const auto& pool = vocab == VocabFlag::iv ? spec.iv_stems : spec.oov_stems;
  constexpr int kWords = kGridCells * kGridCells;
  if (static_cast<int>(pool.size()) < kWords) {
    throw GenerationError(to_string(vocab) + " stem pool has " + std::to_string(pool.size()) +
                          " stems, a scene needs " + std::to_string(kWords));
  }

  SceneSample s;
  s.scene_id = scene_id;
  s.split = split;
  s.vocab = vocab;
  s.context = uniform_int(rng, 0, spec.contexts - 1);
  std::vector<int> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (int i = 0; i < kWords; ++i) {
    const int j = uniform_int(rng, i, static_cast<int>(order.size()) - 1);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  s.target = uniform_int(rng, 0, kWords - 1);

  const float tint = spec.words_only ? 0.0f : static_cast<float>(spec.tint[static_cast<std::size_t>(s.context)]) / 255.0f;
  s.pixels = MatF::Constant(kSceneSize, kSceneSize, tint);
  const int width = spec.word_length * kGlyphSize;
  for (int k = 0; k < kWords; ++k) {
    const Stem& stem = pool[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
    WordPlacement w;
    w.stem = order[static_cast<std::size_t>(k)];
    w.text = spec.word(stem, s.context);
    w.corrupted = k == s.target;
    const int row = k / kGridCells;
    const int col = k % kGridCells;
    w.box = {col * kCellSize + uniform_int(rng, 0, kCellSize - width), row * kCellSize + uniform_int(rng, 0, kCellSize - kGlyphSize),
             width, kGlyphSize};
    auto ids = spec.completion(stem, s.context);
    if (w.corrupted) {
      s.masked_slot = stem.slot;
      s.hidden_letter = Vocab::to_char(ids[static_cast<std::size_t>(stem.slot)]);
      ids[static_cast<std::size_t>(stem.slot)] = Vocab::kBlank;
    }
    s.pixels.block(w.box.y, w.box.x, w.box.h, w.box.w) = render_word(glyphs, ids);
    s.words.push_back(std::move(w));
  }
  return s;
}

Dataset generate_dataset(const ContextSpec& spec, const DatasetCounts& counts, std::uint64_t seed) {
  spec.validate();
  if (counts.train <= 0 || counts.val <= 0 || counts.eval_iv <= 0 || counts.eval_oov <= 0) {
    throw GenerationError("every split count must be positive");
  }
  Dataset ds;
  ds.spec = spec;
  ds.counts = counts;
  ds.seed = seed;
  const GlyphTable glyphs(spec.glyph_seed);
  std::uint64_t next_id = 1;
  auto emit = [&](Split split, VocabFlag vocab, int n) {
    for (int i = 0; i < n; ++i) {
      ds.scenes.push_back(generate_scene(spec, glyphs, split, vocab, next_id++, seed, static_cast<std::uint64_t>(i)));
    }
  };
  emit(Split::train, VocabFlag::iv, counts.train);
  emit(Split::val, VocabFlag::iv, counts.val);
  emit(Split::eval, VocabFlag::iv, counts.eval_iv);
  emit(Split::eval, VocabFlag::oov, counts.eval_oov);
  return ds;
}

MatF crop(const MatF& scene, const Box& box) {
  if (box.w <= 0 || box.h <= 0 || box.x < 0 || box.y < 0 || box.x + box.w > scene.cols() ||
      box.y + box.h > scene.rows()) {
    throw std::out_of_range("crop box (" + std::to_string(box.x) + "," + std::to_string(box.y) + "," +
                            std::to_string(box.w) + "," + std::to_string(box.h) + ") outside " +
                            shape_str(scene.rows(), scene.cols()) + " scene");
  }
  return scene.block(box.y, box.x, box.h, box.w);
}

void write_pgm(const std::string& path, const MatF& pixels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P5\n" << pixels.cols() << ' ' << pixels.rows() << "\n255\n";
  std::string bytes(static_cast<std::size_t>(pixels.size()), '\0');
  for (Index i = 0; i < pixels.size(); ++i) {
    const long v = std::lround(std::clamp(pixels.data()[i], 0.0f, 1.0f) * 255.0f);
    bytes[static_cast<std::size_t>(i)] = static_cast<char>(static_cast<unsigned char>(v));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path);
}

MatF read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error("unsupported PGM: " + path);
  std::string bytes(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw std::runtime_error("truncated PGM: " + path);
  MatF px(h, w);
  for (Index i = 0; i < px.size(); ++i) {
    px.data()[i] = static_cast<float>(static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)])) / 255.0f;
  }
  return px;
}

namespace {

std::string image_name(std::uint64_t id) {
  std::ostringstream os;
  os << "images/" << std::setw(6) << std::setfill('0') << id << ".pgm";
  return os.str();
}

json scene_record(const SceneSample& s) {
  json words = json::array();
  for (const auto& w : s.words) {
    words.push_back({{"box", {w.box.x, w.box.y, w.box.w, w.box.h}},
                     {"text", w.text},
                     {"stem", w.stem},
                     {"corrupted", w.corrupted}});
  }
  return {{"scene_id", s.scene_id},       {"context", s.context},
          {"split", to_string(s.split)},  {"vocab", to_string(s.vocab)},
          {"image", image_name(s.scene_id)}, {"target", s.target},
          {"masked_slot", s.masked_slot}, {"hidden_letter", std::string(1, s.hidden_letter)},
          {"words", words}};
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  {
    std::ofstream spec(fs::path(dir) / "spec.json");
    spec << json{{"spec", ds.spec.to_json()}, {"counts", ds.counts.to_json()}, {"seed", ds.seed}}.dump(2) << '\n';
  }
  std::ofstream manifest(fs::path(dir) / "manifest.jsonl");
  for (const auto& s : ds.scenes) {
    manifest << scene_record(s).dump() << '\n';
    write_pgm((fs::path(dir) / image_name(s.scene_id)).string(), s.pixels);
  }
  if (!manifest) throw std::runtime_error("failed writing manifest in " + dir);
}

Dataset read_dataset(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream spec_in(root / "spec.json");
  if (!spec_in) throw std::runtime_error("no dataset at " + dir + " (run gen-data)");
  const json meta = json::parse(spec_in);
  Dataset ds;
  ds.spec = ContextSpec::from_json(meta.at("spec"));
  ds.counts = DatasetCounts::from_json(meta.at("counts"));
  ds.seed = meta.at("seed").get<std::uint64_t>();
  std::ifstream manifest(root / "manifest.jsonl");
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const json r = json::parse(line);
    SceneSample s;
    s.scene_id = r.at("scene_id").get<std::uint64_t>();
    s.context = r.at("context").get<int>();
    s.split = parse_split(r.at("split").get<std::string>());
    s.vocab = parse_vocab(r.at("vocab").get<std::string>());
    s.target = r.at("target").get<int>();
    s.masked_slot = r.at("masked_slot").get<int>();
    s.hidden_letter = r.at("hidden_letter").get<std::string>().at(0);
    for (const auto& w : r.at("words")) {
      WordPlacement p;
      const auto b = w.at("box").get<std::vector<int>>();
      if (b.size() != 4) throw std::runtime_error("malformed box in manifest");
      p.box = {b[0], b[1], b[2], b[3]};
      p.text = w.at("text").get<std::string>();
      p.stem = w.at("stem").get<int>();
      p.corrupted = w.at("corrupted").get<bool>();
      s.words.push_back(std::move(p));
    }
    s.pixels = read_pgm((root / r.at("image").get<std::string>()).string());
    ds.scenes.push_back(std::move(s));
  }
  return ds;
}

std::string dataset_checksum(const std::string& dir) {
  const fs::path root(dir);
  util::Sha256 h;
  auto feed = [&](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + p.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    h.update(bytes);
  };
  feed(root / "spec.json");
  feed(root / "manifest.jsonl");
  std::ifstream manifest(root / "manifest.jsonl");
  std::string line;
  while (std::getline(manifest, line)) {
    if (!line.empty()) feed(root / json::parse(line).at("image").get<std::string>());
  }
  return util::to_hex(h.finish());
}

}  // namespace scenectx::data
