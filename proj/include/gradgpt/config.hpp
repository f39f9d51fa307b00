#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "gradgpt/layers.hpp"

namespace gradgpt {

/// Layers a low-rank adapter can be attached to.
enum class AttachPoint { q, k, v, att_proj, expand, contract, logits };

std::string_view attach_point_name(AttachPoint p);
AttachPoint parse_attach_point(std::string_view name);
/// Comma-separated list, or "all".
std::set<AttachPoint> parse_attach_points(std::string_view list);
std::string format_attach_points(const std::set<AttachPoint>& points);
const std::set<AttachPoint>& all_attach_points();

struct LoRAConfig {
  std::size_t r = 16;
  double alpha = 16.0;
  std::set<AttachPoint> attach;

  bool has(AttachPoint p) const { return attach.count(p) != 0; }
};

struct ModelConfig {
  std::size_t d = 8;
  std::size_t n_h = 2;
  std::size_t d_h = 4;
  std::size_t d_rho = 4;
  std::size_t n_blocks = 1;
  std::size_t n_vocab = 11;
  std::size_t n_context = 16;
  Activation activation = Activation::gelu;
  double eps = 1e-5;
  bool weight_tying = false;
  // When false, query/key/value biases stay at zero and are never updated.
  bool attention_bias = true;
  std::optional<LoRAConfig> lora;

  std::size_t d_ff() const { return 4 * d; }
};

/// Throws std::invalid_argument describing the first violated constraint.
void validate(const ModelConfig& c);

/// GPT-2 small dimensions (d = 768, n_context = 1024, n_vocab = 50257).
ModelConfig gpt2_small_config(std::size_t n_blocks);

/// The small fixture used for gradient checking.
ModelConfig tiny_config();

/// Flat key:value representation, used by checkpoint headers.
std::vector<std::pair<std::string, std::string>> config_to_pairs(const ModelConfig& c);
ModelConfig config_from_pairs(const std::map<std::string, std::string>& kv);

struct ComponentCount {
  std::string name;
  std::string shape;
  std::uint64_t count = 0;
  bool per_block = false;
};

struct ParamBreakdown {
  std::vector<ComponentCount> components;
  std::uint64_t token_embedding = 0;
  std::uint64_t block_total = 0;
  std::uint64_t untied_total = 0;
  /// Parameters removed by sharing the token table with the logits layer.
  std::uint64_t tying_savings = 0;
  std::uint64_t tied_total = 0;
  /// Total for the configuration as given (tied or untied).
  std::uint64_t grand_total = 0;
};

ParamBreakdown count_params(const ModelConfig& c);

/// Trainable adapter parameters for c.lora; zero when no adapter is configured.
std::uint64_t count_lora_params(const ModelConfig& c);

}  // namespace gradgpt
