#include <algorithm>
#include <sstream>
#include <stdexcept>

#include "gradgpt/config.hpp"

namespace gradgpt {

namespace {

const std::vector<std::pair<AttachPoint, std::string_view>>& attach_names() {
  static const std::vector<std::pair<AttachPoint, std::string_view>> names = {
      {AttachPoint::q, "q"},           {AttachPoint::k, "k"},
      {AttachPoint::v, "v"},           {AttachPoint::att_proj, "att_proj"},
      {AttachPoint::expand, "expand"}, {AttachPoint::contract, "contract"},
      {AttachPoint::logits, "logits"},
  };
  return names;
}

std::size_t parse_count(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const auto n = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: '" + key + "' expects a non-negative integer, got '" + value + "'");
  }
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double x = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return x;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: '" + key + "' expects a real number, got '" + value + "'");
  }
}

bool parse_flag(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw std::invalid_argument("config: '" + key + "' expects true/false, got '" + value + "'");
}

std::string format_real(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace

std::string_view attach_point_name(AttachPoint p) {
  for (const auto& [point, name] : attach_names())
    if (point == p) return name;
  return "?";
}

AttachPoint parse_attach_point(std::string_view name) {
  for (const auto& [point, n] : attach_names())
    if (n == name) return point;
  throw std::invalid_argument("unknown LoRA attach point '" + std::string(name) + "'");
}

const std::set<AttachPoint>& all_attach_points() {
  static const std::set<AttachPoint> all = [] {
    std::set<AttachPoint> s;
    for (const auto& [p, n] : attach_names()) s.insert(p);
    return s;
  }();
  return all;
}

std::set<AttachPoint> parse_attach_points(std::string_view list) {
  if (list == "all") return all_attach_points();
  std::set<AttachPoint> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const auto comma = list.find(',', start);
    const auto item = list.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    if (!item.empty()) out.insert(parse_attach_point(item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (out.empty()) throw std::invalid_argument("empty LoRA attach point list");
  return out;
}

std::string format_attach_points(const std::set<AttachPoint>& points) {
  std::string out;
  for (auto p : points) {
    if (!out.empty()) out += ',';
    out += attach_point_name(p);
  }
  return out;
}

void validate(const ModelConfig& c) {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (c.d < 2) fail("d must be at least 2");
  if (c.n_h == 0 || c.d_h == 0 || c.d_rho == 0) fail("n_h, d_h and d_rho must be positive");
  if (c.n_h * c.d_h != c.d) {
    fail("n_h * d_h = " + std::to_string(c.n_h * c.d_h) + " must equal d = " + std::to_string(c.d));
  }
  if (c.n_blocks == 0) fail("n_blocks must be positive");
  if (c.n_vocab == 0) fail("n_vocab must be positive");
  if (c.n_context == 0) fail("n_context must be positive");
  if (!(c.eps >= 0.0)) fail("eps must be non-negative");
  if (c.lora) {
    const auto& l = *c.lora;
    if (l.r == 0) fail("LoRA rank must be at least 1");
    if (!(l.alpha > 0.0)) fail("LoRA alpha must be positive");
    if (l.attach.empty()) fail("LoRA needs at least one attach point");
    auto check_rank = [&](AttachPoint p, std::size_t f_in, std::size_t f_out) {
      if (l.has(p) && l.r > std::min(f_in, f_out)) {
        fail("LoRA rank " + std::to_string(l.r) + " exceeds min(f_in, f_out) at " +
             std::string(attach_point_name(p)));
      }
    };
    check_rank(AttachPoint::q, c.d, c.n_h * c.d_rho);
    check_rank(AttachPoint::k, c.d, c.n_h * c.d_rho);
    check_rank(AttachPoint::v, c.d, c.n_h * c.d_h);
    check_rank(AttachPoint::att_proj, c.d, c.d);
    check_rank(AttachPoint::expand, c.d, c.d_ff());
    check_rank(AttachPoint::contract, c.d_ff(), c.d);
    check_rank(AttachPoint::logits, c.d, c.n_vocab);
  }
}

ModelConfig gpt2_small_config(std::size_t n_blocks) {
  ModelConfig c;
  c.d = 768;
  c.n_h = 12;
  c.d_h = 64;
  c.d_rho = 64;
  c.n_blocks = n_blocks;
  c.n_vocab = 50257;
  c.n_context = 1024;
  return c;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.d = 8;
  c.n_h = 2;
  c.d_h = 4;
  c.d_rho = 3;
  c.n_blocks = 2;
  c.n_vocab = 11;
  c.n_context = 16;
  return c;
}

std::vector<std::pair<std::string, std::string>> config_to_pairs(const ModelConfig& c) {
  std::vector<std::pair<std::string, std::string>> kv = {
      {"d", std::to_string(c.d)},
      {"n_h", std::to_string(c.n_h)},
      {"d_h", std::to_string(c.d_h)},
      {"d_rho", std::to_string(c.d_rho)},
      {"n_blocks", std::to_string(c.n_blocks)},
      {"n_vocab", std::to_string(c.n_vocab)},
      {"n_context", std::to_string(c.n_context)},
      {"activation", std::string(activation_name(c.activation))},
      {"eps", format_real(c.eps)},
      {"weight_tying", c.weight_tying ? "true" : "false"},
      {"attention_bias", c.attention_bias ? "true" : "false"},
  };
  if (c.lora) {
    kv.emplace_back("lora_r", std::to_string(c.lora->r));
    kv.emplace_back("lora_alpha", format_real(c.lora->alpha));
    kv.emplace_back("lora_attach", format_attach_points(c.lora->attach));
  }
  return kv;
}

ModelConfig config_from_pairs(const std::map<std::string, std::string>& kv) {
  auto get = [&](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument("config: missing key '" + key + "'");
    return it->second;
  };
  ModelConfig c;
  c.d = parse_count("d", get("d"));
  c.n_h = parse_count("n_h", get("n_h"));
  c.d_h = parse_count("d_h", get("d_h"));
  c.d_rho = parse_count("d_rho", get("d_rho"));
  c.n_blocks = parse_count("n_blocks", get("n_blocks"));
  c.n_vocab = parse_count("n_vocab", get("n_vocab"));
  c.n_context = parse_count("n_context", get("n_context"));
  c.activation = parse_activation(get("activation"));
  c.eps = parse_real("eps", get("eps"));
  c.weight_tying = parse_flag("weight_tying", get("weight_tying"));
  c.attention_bias = parse_flag("attention_bias", get("attention_bias"));
  if (kv.count("lora_r")) {
    LoRAConfig l;
    l.r = parse_count("lora_r", get("lora_r"));
    l.alpha = parse_real("lora_alpha", get("lora_alpha"));
    l.attach = parse_attach_points(get("lora_attach"));
    c.lora = l;
  }
  validate(c);
  return c;
}

ParamBreakdown count_params(const ModelConfig& c) {
  using u64 = std::uint64_t;
  const u64 d = c.d, n_h = c.n_h, d_h = c.d_h, d_rho = c.d_rho, ff = c.d_ff();
  const u64 nv = c.n_vocab, nc = c.n_context;
  auto shape = [](u64 r, u64 col) { return std::to_string(r) + "x" + std::to_string(col); };

  ParamBreakdown b;
  auto add = [&](std::string name, std::string shp, u64 n, bool per_block) {
    b.components.push_back({std::move(name), std::move(shp), n, per_block});
  };
  add("token embedding w_tok", shape(nv, d), nv * d, false);
  add("position embedding w_pos", shape(nc, d), nc * d, false);
  add("layernorm 1 w", std::to_string(d), d, true);
  add("layernorm 1 b", std::to_string(d), d, true);
  add("queries w_q (all heads)", std::to_string(n_h) + "x" + shape(d, d_rho), n_h * d * d_rho, true);
  add("queries b_q (all heads)", std::to_string(n_h) + "x" + std::to_string(d_rho), n_h * d_rho, true);
  add("keys w_k (all heads)", std::to_string(n_h) + "x" + shape(d, d_rho), n_h * d * d_rho, true);
  add("keys b_k (all heads)", std::to_string(n_h) + "x" + std::to_string(d_rho), n_h * d_rho, true);
  add("values w_v (all heads)", std::to_string(n_h) + "x" + shape(d, d_h), n_h * d * d_h, true);
  add("values b_v (all heads)", std::to_string(n_h) + "x" + std::to_string(d_h), n_h * d_h, true);
  add("attention projection w", shape(n_h * d_h, d), n_h * d_h * d, true);
  add("attention projection b", std::to_string(d), d, true);
  add("layernorm 2 w", std::to_string(d), d, true);
  add("layernorm 2 b", std::to_string(d), d, true);
  add("expand w", shape(d, ff), d * ff, true);
  add("expand b", std::to_string(ff), ff, true);
  add("contract w", shape(ff, d), ff * d, true);
  add("contract b", std::to_string(d), d, true);
  add("final layernorm w", std::to_string(d), d, false);
  add("final layernorm b", std::to_string(d), d, false);
  add("logits w", shape(d, nv), d * nv, false);
  add("logits b", std::to_string(nv), nv, false);

  b.token_embedding = nv * d;
  for (const auto& comp : b.components)
    if (comp.per_block) b.block_total += comp.count;
  b.untied_total = nv * d + nc * d + u64(c.n_blocks) * b.block_total + 2 * d + (d * nv + nv);
  b.tying_savings = d * nv + nv;
  b.tied_total = b.untied_total - b.tying_savings;
  b.grand_total = c.weight_tying ? b.tied_total : b.untied_total;
  return b;
}

std::uint64_t count_lora_params(const ModelConfig& c) {
  if (!c.lora) return 0;
  using u64 = std::uint64_t;
  const auto& l = *c.lora;
  const u64 r = l.r, d = c.d, ff = c.d_ff();
  u64 per_block = 0;
  if (l.has(AttachPoint::q)) per_block += r * (d + c.n_h * c.d_rho);
  if (l.has(AttachPoint::k)) per_block += r * (d + c.n_h * c.d_rho);
  if (l.has(AttachPoint::v)) per_block += r * (d + c.n_h * c.d_h);
  if (l.has(AttachPoint::att_proj)) per_block += r * (d + d);
  if (l.has(AttachPoint::expand)) per_block += r * (d + ff);
  if (l.has(AttachPoint::contract)) per_block += r * (ff + d);
  u64 total = u64(c.n_blocks) * per_block;
  if (l.has(AttachPoint::logits)) total += r * (d + c.n_vocab);
  return total;
}

}  // namespace gradgpt
