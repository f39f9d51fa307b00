#pragma once

// Container layout:
//   key: value lines (UTF-8), ended by a blank line
//   manifest lines "<name> <rows> <cols> <element width>", ended by a blank line
//   raw little-endian payloads in manifest order

#include <bit>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gradgpt/model.hpp"

namespace gradgpt {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorRecord {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t width = 8;  // bytes per element, 4 or 8
  std::vector<std::uint8_t> payload;
};

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<TensorRecord> tensors;

  std::optional<std::string> get(std::string_view key) const;
  std::map<std::string, std::string> header_map() const;
};

std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint parse_checkpoint(std::string_view bytes);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::string_view bytes);

/// Lowercase hex SHA-256.
std::string content_hash(std::string_view bytes);

inline constexpr std::string_view checkpoint_format = "gradgpt-checkpoint-1";

template <typename T>
TensorRecord encode_tensor(std::string name, std::span<const T> values, std::size_t rows, std::size_t cols) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8, "only 32- and 64-bit elements are stored");
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  TensorRecord r{std::move(name), rows, cols, sizeof(T), {}};
  r.payload.reserve(values.size() * sizeof(T));
  for (T x : values) {
    const U bits = std::bit_cast<U>(x);
    for (std::size_t b = 0; b < sizeof(T); ++b) r.payload.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
  }
  return r;
}

/// Converts from the stored width when it differs from T.
template <typename T>
void decode_tensor(const TensorRecord& r, std::span<T> out) {
  if (r.rows * r.cols != out.size() || r.payload.size() != out.size() * r.width) {
    throw CheckpointError("checkpoint: tensor " + r.name + " has the wrong size");
  }
  auto read = [&](std::size_t i) {
    std::uint64_t bits = 0;
    for (std::size_t b = 0; b < r.width; ++b) bits |= std::uint64_t(r.payload[i * r.width + b]) << (8 * b);
    return bits;
  };
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (r.width == 8) out[i] = static_cast<T>(std::bit_cast<double>(read(i)));
    else if (r.width == 4) out[i] = static_cast<T>(std::bit_cast<float>(static_cast<std::uint32_t>(read(i))));
    else throw CheckpointError("checkpoint: unsupported element width " + std::to_string(r.width));
  }
}

namespace detail {

inline std::vector<std::pair<std::string, std::string>> checkpoint_header(
    std::string_view kind, const ModelConfig& c, const std::vector<std::pair<std::string, std::string>>& extra) {
  std::vector<std::pair<std::string, std::string>> h = {{"format", std::string(checkpoint_format)},
                                                        {"kind", std::string(kind)}};
  for (auto& kv : config_to_pairs(c)) h.push_back(std::move(kv));
  for (const auto& kv : extra) h.push_back(kv);
  return h;
}

inline void expect_kind(const Checkpoint& ck, std::string_view kind) {
  if (ck.get("format") != std::string(checkpoint_format)) throw CheckpointError("checkpoint: unknown format");
  if (ck.get("kind") != std::string(kind)) {
    throw CheckpointError("checkpoint: expected a " + std::string(kind) + " checkpoint, found " +
                          ck.get("kind").value_or("none"));
  }
}

template <typename T>
void fill_by_name(const Checkpoint& ck, ModelParams<T>& p, bool adapters_only) {
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& r : ck.tensors) by_name[r.name] = &r;
  std::size_t used = 0;
  for_each_tensor(p, [&](const auto& s) {
    if (adapters_only && s.role != ParamRole::adapter) return;
    const auto it = by_name.find(s.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint: missing tensor " + s.name);
    if (it->second->rows != s.rows || it->second->cols != s.cols) {
      throw CheckpointError("checkpoint: tensor " + s.name + " has shape " + std::to_string(it->second->rows) +
                            "x" + std::to_string(it->second->cols) + ", expected " + std::to_string(s.rows) + "x" +
                            std::to_string(s.cols));
    }
    decode_tensor(*it->second, s.values);
    ++used;
  });
  if (used != ck.tensors.size()) throw CheckpointError("checkpoint: holds tensors the configuration does not use");
}

}  // namespace detail

template <typename T>
Checkpoint model_checkpoint(const ModelParams<T>& p, const ModelConfig& c,
                            const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  Checkpoint ck;
  ck.header = detail::checkpoint_header("model", c, extra);
  for_each_tensor(p, [&](const auto& s) {
    ck.tensors.push_back(encode_tensor<T>(s.name, std::span<const T>(s.values), s.rows, s.cols));
  });
  return ck;
}

template <typename T>
struct LoadedModel {
  ModelConfig config;
  ModelParams<T> params;
};

template <typename T>
LoadedModel<T> load_model(const Checkpoint& ck) {
  detail::expect_kind(ck, "model");
  LoadedModel<T> out;
  out.config = config_from_pairs(ck.header_map());
  out.params = zero_params<T>(out.config);
  detail::fill_by_name(ck, out.params, false);
  return out;
}

/// Adapter tensors only, tied to a base checkpoint through its content hash.
template <typename T>
Checkpoint adapter_checkpoint(const ModelParams<T>& p, const ModelConfig& c, const std::string& base_hash) {
  if (!c.lora) throw std::invalid_argument("adapter_checkpoint: configuration has no LoRA adapters");
  Checkpoint ck;
  ck.header = detail::checkpoint_header("adapter", c, {{"base_hash", base_hash}});
  for_each_tensor(p, [&](const auto& s) {
    if (s.role != ParamRole::adapter) return;
    ck.tensors.push_back(encode_tensor<T>(s.name, std::span<const T>(s.values), s.rows, s.cols));
  });
  return ck;
}

/// Attaches the adapters of ck to a loaded base model. Rejects adapters
/// trained against a different base.
template <typename T>
void apply_adapter(const Checkpoint& ck, LoadedModel<T>& base, const std::string& base_hash) {
  detail::expect_kind(ck, "adapter");
  const auto recorded = ck.get("base_hash");
  if (!recorded || *recorded != base_hash) {
    throw CheckpointError("adapter: base hash mismatch (adapter expects " + recorded.value_or("nothing") +
                          ", base is " + base_hash + ")");
  }
  const ModelConfig c = config_from_pairs(ck.header_map());
  if (!c.lora) throw CheckpointError("adapter: header carries no LoRA settings");
  ModelConfig merged = base.config;
  merged.lora = c.lora;
  validate(merged);
  attach_lora_shapes(base.params, merged);
  detail::fill_by_name(ck, base.params, true);
  base.config = merged;
}

}  // namespace gradgpt
