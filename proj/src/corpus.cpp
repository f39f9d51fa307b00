#include "gradgpt/corpus.hpp"

#include <array>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace gradgpt {

namespace {

std::string hex_byte(unsigned char c) {
  static constexpr char digits[] = "0123456789abcdef";
  return {digits[c >> 4], digits[c & 15]};
}

int hex_digit(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  return -1;
}

}  // namespace

Vocabulary Vocabulary::bytes() {
  Vocabulary v;
  v.kind_ = VocabKind::byte;
  v.symbols_.resize(256);
  v.index_.resize(256);
  for (int b = 0; b < 256; ++b) {
    v.symbols_[b] = static_cast<unsigned char>(b);
    v.index_[b] = b;
  }
  return v;
}

Vocabulary Vocabulary::charset_of(std::string_view text) {
  std::array<bool, 256> seen{};
  for (char c : text) seen[static_cast<unsigned char>(c)] = true;
  Vocabulary v;
  v.kind_ = VocabKind::charset;
  v.index_.assign(256, -1);
  for (int b = 0; b < 256; ++b) {
    if (!seen[b]) continue;
    v.index_[b] = static_cast<int>(v.symbols_.size());
    v.symbols_.push_back(static_cast<unsigned char>(b));
  }
  if (v.symbols_.empty()) throw std::invalid_argument("vocabulary: empty text has no charset");
  return v;
}

Vocabulary Vocabulary::parse(std::string_view description) {
  if (description == "byte") return bytes();
  constexpr std::string_view prefix = "charset:";
  if (description.substr(0, prefix.size()) != prefix || (description.size() - prefix.size()) % 2 != 0) {
    throw std::invalid_argument("vocabulary: cannot parse '" + std::string(description) + "'");
  }
  std::string text;
  for (std::size_t i = prefix.size(); i < description.size(); i += 2) {
    const int hi = hex_digit(description[i]);
    const int lo = hex_digit(description[i + 1]);
    if (hi < 0 || lo < 0) throw std::invalid_argument("vocabulary: bad hex in charset description");
    text.push_back(static_cast<char>(hi * 16 + lo));
  }
  return charset_of(text);
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto b = static_cast<unsigned char>(text[i]);
    const int id = index_[b];
    if (id < 0) {
      throw std::invalid_argument("encode: byte 0x" + hex_byte(b) + " at offset " + std::to_string(i) +
                                  " is not in the vocabulary");
    }
    ids.push_back(id);
  }
  return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= symbols_.size()) {
      throw std::out_of_range("decode: token " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                              " outside vocabulary of " + std::to_string(symbols_.size()));
    }
    out.push_back(static_cast<char>(symbols_[ids[i]]));
  }
  return out;
}

std::string Vocabulary::describe() const {
  if (kind_ == VocabKind::byte) return "byte";
  std::string out = "charset:";
  for (unsigned char c : symbols_) out += hex_byte(c);
  return out;
}

Corpus Corpus::from_text(std::string text, VocabKind kind) {
  Corpus c;
  c.vocab = kind == VocabKind::byte ? Vocabulary::bytes() : Vocabulary::charset_of(text);
  c.tokens = c.vocab.encode(text);
  c.text = std::move(text);
  return c;
}

Corpus Corpus::from_file(const std::filesystem::path& path, VocabKind kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("corpus: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str(), kind);
}

}  // namespace gradgpt
