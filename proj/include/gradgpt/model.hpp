#pragma once

// The minimal GPT: token + position embeddings, a stack of transformer
// blocks, a final layer norm and the logits layer.
//
// Activation numbering inside a block follows the usual a_1 .. a_10 chain:
//   a_2 = LN1(a_1), a_3 = MHA(a_2), a_4 = FC_attProj(a_3), a_5 = a_1 + a_4,
//   a_6 = LN2(a_5), a_7 = FC_expand(a_6), a_8 = g(a_7), a_9 = FC_contract(a_8),
//   a_10 = a_5 + a_9.
// Then a_11 = LN_final(a_10) and a_12 = FC_logits(a_11) are the logits.

#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "gradgpt/config.hpp"
#include "gradgpt/layers.hpp"

namespace gradgpt {

template <typename T>
struct BlockAdapters {
  std::optional<LoRAParams<T>> q, k, v, att_proj, expand, contract;
};

template <typename T>
struct BlockParams {
  LayerNormParams<T> ln1;
  std::vector<AttentionHeadParams<T>> heads;
  LinearParams<T> att_proj;
  LayerNormParams<T> ln2;
  LinearParams<T> fc_expand;
  LinearParams<T> fc_contract;
  BlockAdapters<T> lora;
};

/// Also used, shape for shape, to hold gradients.
template <typename T>
struct ModelParams {
  EmbeddingParams<T> tok;
  EmbeddingParams<T> pos;
  std::vector<BlockParams<T>> blocks;
  LayerNormParams<T> ln_final;
  /// Absent under weight tying: the logits then reuse tok transposed.
  std::optional<LinearParams<T>> fc_logits;
  std::optional<LoRAParams<T>> lora_logits;
};

template <typename T>
using ModelGrads = ModelParams<T>;

enum class ParamRole {
  base,
  attention_bias,  // query/key/value biases
  adapter,
};

template <typename E>
struct TensorSlot {
  std::string name;
  std::span<E> values;
  std::size_t rows = 0;
  std::size_t cols = 0;
  ParamRole role = ParamRole::base;
};

/// Visits every parameter tensor in a fixed order. Vectors are reported as
/// 1 x n. Works on const and non-const parameter sets.
template <typename P, typename F>
void for_each_tensor(P& params, F&& f) {
  using E = std::remove_reference_t<decltype(*params.tok.w_emb.data())>;
  auto mat = [&](std::string name, auto& m, ParamRole role) {
    f(TensorSlot<E>{std::move(name), m.values(), m.rows(), m.cols(), role});
  };
  auto vec = [&](std::string name, auto& v, ParamRole role) {
    f(TensorSlot<E>{std::move(name), v.values(), 1, v.size(), role});
  };
  auto linear = [&](const std::string& prefix, auto& l, ParamRole bias_role) {
    mat(prefix + ".w", l.w, ParamRole::base);
    vec(prefix + ".b", l.b, bias_role);
  };
  auto norm = [&](const std::string& prefix, auto& n) {
    vec(prefix + ".w", n.w, ParamRole::base);
    vec(prefix + ".b", n.b, ParamRole::base);
  };
  auto adapter = [&](const std::string& prefix, auto& opt) {
    if (!opt) return;
    mat(prefix + ".d", opt->d_mat, ParamRole::adapter);
    mat(prefix + ".u", opt->u_mat, ParamRole::adapter);
  };

  mat("tok.w", params.tok.w_emb, ParamRole::base);
  mat("pos.w", params.pos.w_emb, ParamRole::base);
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    auto& blk = params.blocks[i];
    const std::string b = "blocks." + std::to_string(i);
    norm(b + ".ln1", blk.ln1);
    for (std::size_t h = 0; h < blk.heads.size(); ++h) {
      const std::string hp = b + ".heads." + std::to_string(h);
      linear(hp + ".q", blk.heads[h].q, ParamRole::attention_bias);
      linear(hp + ".k", blk.heads[h].k, ParamRole::attention_bias);
      linear(hp + ".v", blk.heads[h].v, ParamRole::attention_bias);
    }
    linear(b + ".att_proj", blk.att_proj, ParamRole::base);
    norm(b + ".ln2", blk.ln2);
    linear(b + ".fc_expand", blk.fc_expand, ParamRole::base);
    linear(b + ".fc_contract", blk.fc_contract, ParamRole::base);
    adapter(b + ".lora.q", blk.lora.q);
    adapter(b + ".lora.k", blk.lora.k);
    adapter(b + ".lora.v", blk.lora.v);
    adapter(b + ".lora.att_proj", blk.lora.att_proj);
    adapter(b + ".lora.expand", blk.lora.expand);
    adapter(b + ".lora.contract", blk.lora.contract);
  }
  norm("ln_final", params.ln_final);
  if (params.fc_logits) linear("logits", *params.fc_logits, ParamRole::base);
  adapter("lora.logits", params.lora_logits);
}

template <typename T>
std::size_t total_elements(const ModelParams<T>& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const auto& s) { n += s.values.size(); });
  return n;
}

struct InitOptions {
  double weight_std = 0.02;
  // Nonzero values randomize biases and layer-norm affine parameters; used by
  // gradient-check fixtures so that every gradient is exercised.
  double bias_std = 0.0;
  double norm_jitter = 0.0;
};

namespace detail {

template <typename T>
LinearParams<T> make_linear(std::size_t f_in, std::size_t f_out) {
  return {Matrix<T>(f_in, f_out), Vector<T>(f_out)};
}

template <typename T>
LayerNormParams<T> make_norm(std::size_t d, double eps) {
  return {Vector<T>(d, T(1)), Vector<T>(d, T(0)), static_cast<T>(eps)};
}

template <typename T>
LoRAParams<T> make_lora(std::size_t f_in, std::size_t f_out, const LoRAConfig& l) {
  return {Matrix<T>(f_in, l.r), Matrix<T>(l.r, f_out), static_cast<T>(l.alpha)};
}

}  // namespace detail

/// Adds zero-initialized adapters for every attach point in c.lora
/// (replacing any that exist).
template <typename T>
void attach_lora_shapes(ModelParams<T>& p, const ModelConfig& c) {
  for (auto& blk : p.blocks) blk.lora = {};
  p.lora_logits.reset();
  if (!c.lora) return;
  const auto& l = *c.lora;
  for (auto& blk : p.blocks) {
    if (l.has(AttachPoint::q)) blk.lora.q = detail::make_lora<T>(c.d, c.n_h * c.d_rho, l);
    if (l.has(AttachPoint::k)) blk.lora.k = detail::make_lora<T>(c.d, c.n_h * c.d_rho, l);
    if (l.has(AttachPoint::v)) blk.lora.v = detail::make_lora<T>(c.d, c.n_h * c.d_h, l);
    if (l.has(AttachPoint::att_proj)) blk.lora.att_proj = detail::make_lora<T>(c.d, c.d, l);
    if (l.has(AttachPoint::expand)) blk.lora.expand = detail::make_lora<T>(c.d, c.d_ff(), l);
    if (l.has(AttachPoint::contract)) blk.lora.contract = detail::make_lora<T>(c.d_ff(), c.d, l);
  }
  if (l.has(AttachPoint::logits)) p.lora_logits = detail::make_lora<T>(c.d, c.n_vocab, l);
}

/// All-zero parameter set with the shapes implied by c (layer-norm weights
/// are zero too, as befits a gradient container).
template <typename T>
ModelParams<T> zero_params(const ModelConfig& c) {
  validate(c);
  ModelParams<T> p;
  p.tok.w_emb = Matrix<T>(c.n_vocab, c.d);
  p.pos.w_emb = Matrix<T>(c.n_context, c.d);
  p.blocks.resize(c.n_blocks);
  for (auto& blk : p.blocks) {
    blk.ln1 = detail::make_norm<T>(c.d, c.eps);
    blk.heads.resize(c.n_h);
    for (auto& h : blk.heads) {
      h.q = detail::make_linear<T>(c.d, c.d_rho);
      h.k = detail::make_linear<T>(c.d, c.d_rho);
      h.v = detail::make_linear<T>(c.d, c.d_h);
    }
    blk.att_proj = detail::make_linear<T>(c.n_h * c.d_h, c.d);
    blk.ln2 = detail::make_norm<T>(c.d, c.eps);
    blk.fc_expand = detail::make_linear<T>(c.d, c.d_ff());
    blk.fc_contract = detail::make_linear<T>(c.d_ff(), c.d);
  }
  p.ln_final = detail::make_norm<T>(c.d, c.eps);
  if (!c.weight_tying) p.fc_logits = detail::make_linear<T>(c.d, c.n_vocab);
  attach_lora_shapes(p, c);
  for_each_tensor(p, [](const auto& s) { std::fill(s.values.begin(), s.values.end(), T(0)); });
  return p;
}

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& src) {
  ModelParams<T> out = src;
  for_each_tensor(out, [](const auto& s) { std::fill(s.values.begin(), s.values.end(), T(0)); });
  return out;
}

/// Normal(0, weight_std) weights, zero biases, unit/zero layer norms, LoRA
/// d ~ Normal(0, weight_std) and u = 0.
template <typename T>
ModelParams<T> init_params(const ModelConfig& c, std::uint64_t seed, InitOptions opt = {}) {
  ModelParams<T> p = zero_params<T>(c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](std::span<T> xs, double mean, double std) {
    for (auto& x : xs) x = static_cast<T>(mean + std * normal(rng));
  };
  for_each_tensor(p, [&](const auto& s) {
    const std::string& n = s.name;
    const bool is_norm = n.find(".ln") != std::string::npos || n.rfind("ln_final", 0) == 0;
    const bool is_bias = n.size() >= 2 && n.compare(n.size() - 2, 2, ".b") == 0;
    if (s.role == ParamRole::adapter) {
      if (n.back() == 'd') fill(s.values, 0.0, opt.weight_std);
    } else if (is_norm) {
      const double mean = is_bias ? 0.0 : 1.0;
      if (opt.norm_jitter > 0) fill(s.values, mean, opt.norm_jitter);
      else std::fill(s.values.begin(), s.values.end(), static_cast<T>(mean));
    } else if (is_bias) {
      const bool frozen = s.role == ParamRole::attention_bias && !c.attention_bias;
      if (opt.bias_std > 0 && !frozen) fill(s.values, 0.0, opt.bias_std);
    } else {
      fill(s.values, 0.0, opt.weight_std);
    }
  });
  return p;
}

/// Parameters that an optimizer may move under the given mode.
inline bool is_trainable(ParamRole role, const ModelConfig& c, bool freeze_base) {
  switch (role) {
    case ParamRole::adapter:
      return true;
    case ParamRole::attention_bias:
      return c.attention_bias && !freeze_base;
    case ParamRole::base:
      return !freeze_base;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Forward

template <typename T>
struct BlockTrace {
  Matrix<T> a1;
  NormCache<T> ln1;
  std::vector<HeadCache<T>> heads;
  Matrix<T> a3;
  Matrix<T> a5;
  NormCache<T> ln2;
  Matrix<T> a6, a7, a8;
  Matrix<T> a10;
};

template <typename T>
struct ForwardTrace {
  std::vector<TokenId> tokens;
  Matrix<T> a1;
  std::vector<BlockTrace<T>> blocks;
  NormCache<T> ln_final;
  Matrix<T> a11;
  Matrix<T> logits;
  Matrix<T> y_pred;
};

template <typename T>
struct ModelForward {
  Matrix<T> logits;
  Matrix<T> y_pred;
  ForwardTrace<T> trace;
};

namespace detail {

template <typename T>
Matrix<T> linear_with_adapter(const Matrix<T>& a, const LinearParams<T>& base,
                              const std::optional<LoRAParams<T>>& adapter) {
  Matrix<T> out = linear_forward(a, base);
  if (adapter) add_into(out, lora_forward(a, *adapter));
  return out;
}

template <typename T>
QKVAdapters<T> qkv_adapters(const BlockAdapters<T>& l) {
  return {l.q ? &*l.q : nullptr, l.k ? &*l.k : nullptr, l.v ? &*l.v : nullptr};
}

template <typename T>
Matrix<T> logits_forward(const Matrix<T>& a11, const ModelParams<T>& p) {
  Matrix<T> logits = p.fc_logits ? linear_forward(a11, *p.fc_logits) : matmul_nt(a11, p.tok.w_emb);
  if (p.lora_logits) add_into(logits, lora_forward(a11, *p.lora_logits));
  return logits;
}

inline void check_tokens(std::span<const TokenId> tokens, const ModelConfig& c) {
  if (tokens.empty()) throw std::invalid_argument("model: empty token sequence");
  if (tokens.size() > c.n_context) {
    throw std::invalid_argument("model: sequence of " + std::to_string(tokens.size()) +
                                " tokens exceeds n_context = " + std::to_string(c.n_context));
  }
}

inline std::vector<TokenId> positions(std::size_t first, std::size_t n) {
  std::vector<TokenId> ids(n);
  std::iota(ids.begin(), ids.end(), static_cast<TokenId>(first));
  return ids;
}

}  // namespace detail

template <typename T>
ModelForward<T> model_forward(std::span<const TokenId> tokens, const ModelParams<T>& p, const ModelConfig& c) {
  detail::check_tokens(tokens, c);
  const auto pos_ids = detail::positions(0, tokens.size());

  ForwardTrace<T> tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.a1 = embedding_forward(tokens, p.tok);
  add_into(tr.a1, embedding_forward(std::span<const TokenId>(pos_ids), p.pos));

  Matrix<T> x = tr.a1;
  tr.blocks.reserve(p.blocks.size());
  for (const auto& blk : p.blocks) {
    BlockTrace<T> bt;
    bt.a1 = x;
    auto ln1 = layernorm_forward(x, blk.ln1);
    bt.ln1 = std::move(ln1.cache);
    auto mha = mha_forward(ln1.out, blk.heads, true, detail::qkv_adapters(blk.lora));
    bt.heads = std::move(mha.caches);
    bt.a3 = std::move(mha.out);
    bt.a5 = add(x, detail::linear_with_adapter(bt.a3, blk.att_proj, blk.lora.att_proj));

    auto ln2 = layernorm_forward(bt.a5, blk.ln2);
    bt.ln2 = std::move(ln2.cache);
    bt.a6 = std::move(ln2.out);
    bt.a7 = detail::linear_with_adapter(bt.a6, blk.fc_expand, blk.lora.expand);
    bt.a8 = activation_forward(bt.a7, c.activation);
    bt.a10 = add(bt.a5, detail::linear_with_adapter(bt.a8, blk.fc_contract, blk.lora.contract));
    x = bt.a10;
    tr.blocks.push_back(std::move(bt));
  }

  auto lnf = layernorm_forward(x, p.ln_final);
  tr.ln_final = std::move(lnf.cache);
  tr.a11 = std::move(lnf.out);
  tr.logits = detail::logits_forward(tr.a11, p);
  tr.y_pred = softmax_rows(tr.logits);

  ModelForward<T> out;
  out.logits = tr.logits;
  out.y_pred = tr.y_pred;
  out.trace = std::move(tr);
  return out;
}

/// Forward-only loss; the finite-difference oracle is built on this.
template <typename T>
T model_loss(std::span<const TokenId> tokens, const Targets& targets, const ModelParams<T>& p, const ModelConfig& c) {
  return loss_forward(model_forward(tokens, p, c).logits, targets).loss;
}

// ---------------------------------------------------------------------------
// Backward

namespace detail {

template <typename T>
void store_linear(LinearParams<T>& g, LinearBackward<T>&& lb) {
  g.w = std::move(lb.grad_w);
  g.b = std::move(lb.grad_b);
}

template <typename T>
void store_lora(std::optional<LoRAParams<T>>& g, LoRABackward<T>&& lb) {
  g->d_mat = std::move(lb.grad_d);
  g->u_mat = std::move(lb.grad_u);
}

template <typename T>
Matrix<T> linear_with_adapter_backward(const Matrix<T>& delta, const Matrix<T>& a_in, const LinearParams<T>& base,
                                       const std::optional<LoRAParams<T>>& adapter, LinearParams<T>& g_base,
                                       std::optional<LoRAParams<T>>& g_adapter) {
  auto lb = linear_backward(delta, a_in, base);
  Matrix<T> delta_in = std::move(lb.delta_in);
  store_linear(g_base, std::move(lb));
  if (adapter) {
    auto ab = lora_backward(delta, a_in, *adapter);
    add_into(delta_in, ab.delta_in);
    store_lora(g_adapter, std::move(ab));
  }
  return delta_in;
}

}  // namespace detail

/// Gradients of the mean next-token loss. With freeze_base, every
/// non-adapter gradient is returned as exact zeros.
template <typename T>
ModelGrads<T> model_backward(const ForwardTrace<T>& tr, const Targets& targets, const ModelParams<T>& p,
                             const ModelConfig& c, bool freeze_base = false) {
  if (tr.blocks.size() != p.blocks.size() || tr.tokens.size() != targets.size() ||
      tr.logits.rows() != tr.tokens.size()) {
    throw ShapeError("model_backward: trace does not match parameters/targets");
  }
  ModelGrads<T> g = zeros_like(p);
  const std::size_t n_contrib = detail::check_targets(tr.y_pred, targets);

  const Matrix<T> d12 = loss_backward(tr.y_pred, targets, n_contrib);
  Matrix<T> delta;  // running error signal
  if (p.fc_logits) {
    auto lb = linear_backward(d12, tr.a11, *p.fc_logits);
    delta = std::move(lb.delta_in);
    detail::store_linear(*g.fc_logits, std::move(lb));
  } else {
    delta = matmul(d12, p.tok.w_emb);
    add_into(g.tok.w_emb, matmul_tn(d12, tr.a11));
  }
  if (p.lora_logits) {
    auto ab = lora_backward(d12, tr.a11, *p.lora_logits);
    add_into(delta, ab.delta_in);
    detail::store_lora(g.lora_logits, std::move(ab));
  }

  {
    auto lnb = layernorm_backward(delta, tr.ln_final, p.ln_final);
    delta = std::move(lnb.delta_in);
    g.ln_final.w = std::move(lnb.grad_w);
    g.ln_final.b = std::move(lnb.grad_b);
  }

  for (std::size_t i = p.blocks.size(); i-- > 0;) {
    const auto& blk = p.blocks[i];
    const auto& bt = tr.blocks[i];
    auto& gb = g.blocks[i];
    const Matrix<T>& d10 = delta;

    // expand-and-contract sublayer
    Matrix<T> d8 = detail::linear_with_adapter_backward(d10, bt.a8, blk.fc_contract, blk.lora.contract,
                                                        gb.fc_contract, gb.lora.contract);
    Matrix<T> d7 = activation_backward(d8, bt.a7, c.activation);
    Matrix<T> d6 = detail::linear_with_adapter_backward(d7, bt.a6, blk.fc_expand, blk.lora.expand, gb.fc_expand,
                                                        gb.lora.expand);
    auto ln2b = layernorm_backward(d6, bt.ln2, blk.ln2);
    gb.ln2.w = std::move(ln2b.grad_w);
    gb.ln2.b = std::move(ln2b.grad_b);
    Matrix<T> d5 = d10;  // residual path first
    add_into(d5, ln2b.delta_in);

    // self-attention sublayer
    Matrix<T> d3 = detail::linear_with_adapter_backward(d5, bt.a3, blk.att_proj, blk.lora.att_proj, gb.att_proj,
                                                        gb.lora.att_proj);
    auto mb = mha_backward(d3, bt.heads, blk.heads, detail::qkv_adapters(blk.lora));
    for (std::size_t h = 0; h < blk.heads.size(); ++h) gb.heads[h] = std::move(mb.grads[h]);
    if (mb.lora_q) detail::store_lora(gb.lora.q, std::move(*mb.lora_q));
    if (mb.lora_k) detail::store_lora(gb.lora.k, std::move(*mb.lora_k));
    if (mb.lora_v) detail::store_lora(gb.lora.v, std::move(*mb.lora_v));
    auto ln1b = layernorm_backward(mb.delta_in, bt.ln1, blk.ln1);
    gb.ln1.w = std::move(ln1b.grad_w);
    gb.ln1.b = std::move(ln1b.grad_b);
    Matrix<T> d1 = std::move(d5);
    add_into(d1, ln1b.delta_in);
    delta = std::move(d1);
  }

  const auto pos_ids = detail::positions(0, tr.tokens.size());
  add_into(g.tok.w_emb, embedding_backward(std::span<const TokenId>(tr.tokens), delta, p.tok.w_emb.rows()));
  g.pos.w_emb = embedding_backward(std::span<const TokenId>(pos_ids), delta, p.pos.w_emb.rows());

  for_each_tensor(g, [&](const auto& s) {
    if (!is_trainable(s.role, c, freeze_base)) std::fill(s.values.begin(), s.values.end(), T(0));
  });
  return g;
}

// ---------------------------------------------------------------------------
// LoRA utilities

/// Folds every adapter into its base weights (w += alpha * d * u) and drops
/// the adapters. The logits adapter cannot be merged into a tied table.
template <typename T>
ModelParams<T> merge_lora(const ModelParams<T>& p) {
  ModelParams<T> out = p;
  auto fold = [](Matrix<T>& w, const std::optional<LoRAParams<T>>& a) {
    if (a) add_into(w, scale(matmul(a->d_mat, a->u_mat), a->alpha));
  };
  auto fold_heads = [](std::vector<AttentionHeadParams<T>>& heads, const std::optional<LoRAParams<T>>& a,
                       LinearParams<T> AttentionHeadParams<T>::*member) {
    if (!a) return;
    const Matrix<T> delta = scale(matmul(a->d_mat, a->u_mat), a->alpha);
    std::size_t col = 0;
    for (auto& h : heads) {
      Matrix<T>& w = (h.*member).w;
      add_into(w, slice_cols(delta, col, w.cols()));
      col += w.cols();
    }
  };
  for (auto& blk : out.blocks) {
    fold_heads(blk.heads, blk.lora.q, &AttentionHeadParams<T>::q);
    fold_heads(blk.heads, blk.lora.k, &AttentionHeadParams<T>::k);
    fold_heads(blk.heads, blk.lora.v, &AttentionHeadParams<T>::v);
    fold(blk.att_proj.w, blk.lora.att_proj);
    fold(blk.fc_expand.w, blk.lora.expand);
    fold(blk.fc_contract.w, blk.lora.contract);
    blk.lora = {};
  }
  if (p.lora_logits) {
    if (!out.fc_logits) throw std::invalid_argument("merge_lora: logits adapter cannot merge into a tied table");
    fold(out.fc_logits->w, p.lora_logits);
    out.lora_logits.reset();
  }
  return out;
}

/// Plain SGD step that moves adapter tensors only; base tensors are left
/// bit-identical.
template <typename T>
void lora_finetune_step(ModelParams<T>& params, const ModelGrads<T>& grads, T lr) {
  std::vector<std::span<const T>> g;
  for_each_tensor(grads, [&](const auto& s) { g.push_back(s.values); });
  std::size_t i = 0;
  for_each_tensor(params, [&](const auto& s) {
    const auto& gs = g.at(i++);
    if (s.role != ParamRole::adapter) return;
    for (std::size_t j = 0; j < s.values.size(); ++j) s.values[j] -= lr * gs[j];
  });
}

}  // namespace gradgpt
