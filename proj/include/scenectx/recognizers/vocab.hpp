#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace scenectx {

/// Token ids shared by the data generator and the recognizers. Letters
/// 'a'..'z' map to 0..25; EOS is the only non-letter output class.
struct Vocab {
  static constexpr int kLetters = 26;
  static constexpr int kEos = 26;
  static constexpr int kPad = 27;    // padding / decoder start token
  static constexpr int kBlank = 28;  // corruption glyph
  static constexpr int kOutputClasses = 27;
  static constexpr int kEmbeddingRows = 28;  // letters, EOS, start

  static int from_char(char c) {
    if (c < 'a' || c > 'z') throw std::invalid_argument(std::string("not a letter: ") + c);
    return c - 'a';
  }
  static char to_char(int id) {
    if (id < 0 || id >= kLetters) throw std::invalid_argument("not a letter id: " + std::to_string(id));
    return static_cast<char>('a' + id);
  }
  static std::vector<int> encode(const std::string& word) {
    std::vector<int> ids;
    ids.reserve(word.size());
    for (char c : word) ids.push_back(from_char(c));
    return ids;
  }
};

}  // namespace scenectx
