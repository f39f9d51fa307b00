#include "gradgpt/checkpoint.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <sstream>

namespace gradgpt {

namespace {

std::size_t parse_size(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw CheckpointError("checkpoint: bad " + what + " '" + s + "'");
  return static_cast<std::size_t>(v);
}

/// Reads up to the next '\n', advancing pos past it.
std::string_view next_line(std::string_view bytes, std::size_t& pos) {
  const auto nl = bytes.find('\n', pos);
  if (nl == std::string_view::npos) throw CheckpointError("checkpoint: truncated text section");
  const auto line = bytes.substr(pos, nl - pos);
  pos = nl + 1;
  return line;
}

}  // namespace

std::optional<std::string> Checkpoint::get(std::string_view key) const {
  for (const auto& [k, v] : header)
    if (k == key) return v;
  return std::nullopt;
}

std::map<std::string, std::string> Checkpoint::header_map() const { return {header.begin(), header.end()}; }

std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out;
  for (const auto& [k, v] : ck.header) {
    if (k.empty() || k.find_first_of(":\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw CheckpointError("checkpoint: header entry '" + k + "' cannot be stored");
    }
    out += k + ": " + v + "\n";
  }
  out += "\n";
  for (const auto& t : ck.tensors) {
    if (t.name.empty() || t.name.find_first_of(" \n") != std::string::npos) {
      throw CheckpointError("checkpoint: tensor name '" + t.name + "' cannot be stored");
    }
    out += t.name + " " + std::to_string(t.rows) + " " + std::to_string(t.cols) + " " + std::to_string(t.width) +
           "\n";
  }
  out += "\n";
  for (const auto& t : ck.tensors) out.append(t.payload.begin(), t.payload.end());
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  Checkpoint ck;
  std::size_t pos = 0;
  for (auto line = next_line(bytes, pos); !line.empty(); line = next_line(bytes, pos)) {
    const auto colon = line.find(": ");
    if (colon == std::string_view::npos) throw CheckpointError("checkpoint: malformed header line");
    ck.header.emplace_back(std::string(line.substr(0, colon)), std::string(line.substr(colon + 2)));
  }
  for (auto line = next_line(bytes, pos); !line.empty(); line = next_line(bytes, pos)) {
    std::istringstream fields{std::string(line)};
    std::string name, rows, cols, width, extra;
    if (!(fields >> name >> rows >> cols >> width) || (fields >> extra)) {
      throw CheckpointError("checkpoint: malformed manifest line '" + std::string(line) + "'");
    }
    TensorRecord r;
    r.name = name;
    r.rows = parse_size(rows, "row count");
    r.cols = parse_size(cols, "column count");
    r.width = parse_size(width, "element width");
    if (r.width != 4 && r.width != 8) throw CheckpointError("checkpoint: element width must be 4 or 8");
    ck.tensors.push_back(std::move(r));
  }
  for (auto& t : ck.tensors) {
    const std::size_t n = t.rows * t.cols * t.width;
    if (bytes.size() - pos < n) throw CheckpointError("checkpoint: payload of " + t.name + " is truncated");
    t.payload.assign(bytes.begin() + pos, bytes.begin() + pos + n);
    pos += n;
  }
  if (pos != bytes.size()) throw CheckpointError("checkpoint: trailing bytes after the last payload");
  return ck;
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

std::string content_hash(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("content_hash: SHA-256 failed");
  }
  static constexpr char digits[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(digits[digest[i] >> 4]);
    hex.push_back(digits[digest[i] & 15]);
  }
  return hex;
}

}  // namespace gradgpt
