#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradgpt/layers.hpp"

namespace gradgpt {

enum class VocabKind { byte, charset };

/// Byte-level tokenizer. The charset variant maps only the distinct bytes of
/// the training text, in increasing byte order.
class Vocabulary {
 public:
  static Vocabulary bytes();
  static Vocabulary charset_of(std::string_view text);
  /// Inverse of describe().
  static Vocabulary parse(std::string_view description);

  VocabKind kind() const { return kind_; }
  std::size_t size() const { return symbols_.size(); }
  /// Throws std::invalid_argument on a byte outside a charset vocabulary.
  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;
  /// "byte", or "charset:" followed by the symbols in hex.
  std::string describe() const;

 private:
  VocabKind kind_ = VocabKind::byte;
  std::vector<unsigned char> symbols_;
  std::vector<int> index_;  // byte -> id, -1 when absent
};

struct Corpus {
  std::string text;
  Vocabulary vocab;
  std::vector<TokenId> tokens;

  static Corpus from_text(std::string text, VocabKind kind = VocabKind::byte);
  static Corpus from_file(const std::filesystem::path& path, VocabKind kind = VocabKind::byte);
};

}  // namespace gradgpt
