#pragma once

// Forward/backward pairs for every layer of the network.
//
// Each forward returns its output plus whatever the backward needs; each
// backward consumes the upstream error signal (the loss gradient with respect
// to the layer output) and returns the downstream signal together with the
// parameter gradients.

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradgpt/matrix.hpp"
#include "gradgpt/ops.hpp"

namespace gradgpt {

using TokenId = int;

// ---------------------------------------------------------------------------
// Parameter and cache types

template <typename T>
struct LinearParams {
  Matrix<T> w;  // [f_in x f_out]
  Vector<T> b;  // [f_out]

  std::size_t in_features() const { return w.rows(); }
  std::size_t out_features() const { return w.cols(); }
};

template <typename T>
struct EmbeddingParams {
  Matrix<T> w_emb;  // [n_V x d]
};

template <typename T>
struct LayerNormParams {
  Vector<T> w;
  Vector<T> b;
  T eps = T(1e-5);
};

/// Queries and keys share their output width d_rho; values produce d_h.
template <typename T>
struct AttentionHeadParams {
  LinearParams<T> q;
  LinearParams<T> k;
  LinearParams<T> v;
};

template <typename T>
struct LoRAParams {
  Matrix<T> d_mat;  // [f_in x r]
  Matrix<T> u_mat;  // [r x f_out]
  T alpha = T(1);

  std::size_t rank() const { return d_mat.cols(); }
};

template <typename T>
struct HeadCache {
  Matrix<T> input;
  Matrix<T> q, k, v;
  Matrix<T> rho;  // row-stochastic attention weights
  bool causal = true;
};

template <typename T>
struct NormCache {
  Matrix<T> input;
  Matrix<T> normalized;
  Vector<T> sigma;
};

// ---------------------------------------------------------------------------
// Embedding

template <typename T>
Matrix<T> embedding_forward(std::span<const TokenId> ids, const EmbeddingParams<T>& p) {
  if (ids.empty()) throw std::invalid_argument("embedding_forward: empty token list");
  const std::size_t n_v = p.w_emb.rows();
  Matrix<T> out(ids.size(), p.w_emb.cols());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= n_v) {
      throw std::out_of_range("embedding_forward: id " + std::to_string(ids[t]) + " at position " +
                              std::to_string(t) + " outside [0, " + std::to_string(n_v) + ")");
    }
    const auto src = p.w_emb.row(static_cast<std::size_t>(ids[t]));
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

/// Scatter-add of the error rows into the table rows they were gathered
/// from. The error flow stops here: no downstream signal is produced.
template <typename T>
Matrix<T> embedding_backward(std::span<const TokenId> ids, const Matrix<T>& delta, std::size_t n_v) {
  if (delta.rows() != ids.size()) {
    throw ShapeError("embedding_backward: " + std::to_string(ids.size()) + " ids vs delta " + delta.shape());
  }
  Matrix<T> grad(n_v, delta.cols());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= n_v) {
      throw std::out_of_range("embedding_backward: id " + std::to_string(ids[t]) + " at position " +
                              std::to_string(t) + " outside [0, " + std::to_string(n_v) + ")");
    }
    auto dst = grad.row(static_cast<std::size_t>(ids[t]));
    const auto src = delta.row(t);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Fully-connected

template <typename T>
Matrix<T> linear_forward(const Matrix<T>& a, const LinearParams<T>& p) {
  if (a.cols() != p.w.rows() || p.b.size() != p.w.cols()) {
    throw ShapeError("linear_forward: input " + a.shape() + " against weights " + p.w.shape() +
                     " and bias of length " + std::to_string(p.b.size()));
  }
  Matrix<T> out = matmul(a, p.w);
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += p.b[j];
  return out;
}

template <typename T>
struct LinearBackward {
  Matrix<T> delta_in;
  Matrix<T> grad_w;
  Vector<T> grad_b;
};

template <typename T>
LinearBackward<T> linear_backward(const Matrix<T>& delta, const Matrix<T>& a_in, const LinearParams<T>& p) {
  if (delta.rows() != a_in.rows() || delta.cols() != p.w.cols() || a_in.cols() != p.w.rows()) {
    throw ShapeError("linear_backward: delta " + delta.shape() + ", input " + a_in.shape() + ", weights " +
                     p.w.shape());
  }
  return {matmul_nt(delta, p.w), matmul_tn(a_in, delta), sum_over_tokens(delta)};
}

// ---------------------------------------------------------------------------
// LoRA adapter: alpha * a * d * u, evaluated left to right.

template <typename T>
Matrix<T> lora_forward(const Matrix<T>& a, const LoRAParams<T>& p) {
  if (a.cols() != p.d_mat.rows() || p.d_mat.cols() != p.u_mat.rows()) {
    throw ShapeError("lora_forward: input " + a.shape() + " against d " + p.d_mat.shape() + " and u " +
                     p.u_mat.shape());
  }
  return scale(matmul(matmul(a, p.d_mat), p.u_mat), p.alpha);
}

template <typename T>
struct LoRABackward {
  Matrix<T> delta_in;
  Matrix<T> grad_d;
  Matrix<T> grad_u;
};

template <typename T>
LoRABackward<T> lora_backward(const Matrix<T>& delta, const Matrix<T>& a_in, const LoRAParams<T>& p) {
  if (delta.rows() != a_in.rows() || delta.cols() != p.u_mat.cols() || a_in.cols() != p.d_mat.rows()) {
    throw ShapeError("lora_backward: delta " + delta.shape() + ", input " + a_in.shape() + ", d " +
                     p.d_mat.shape() + ", u " + p.u_mat.shape());
  }
  LoRABackward<T> out;
  out.delta_in = scale(matmul_nt(delta, matmul(p.d_mat, p.u_mat)), p.alpha);
  out.grad_d = scale(matmul_nt(matmul_tn(a_in, delta), p.u_mat), p.alpha);
  out.grad_u = scale(matmul_tn(matmul(a_in, p.d_mat), delta), p.alpha);
  return out;
}

// ---------------------------------------------------------------------------
// Single-head self-attention

/// Optional additive contributions to the query/key/value feature maps,
/// e.g. the per-head slice of a low-rank adapter.
template <typename T>
struct FeatureOffsets {
  const Matrix<T>* q = nullptr;
  const Matrix<T>* k = nullptr;
  const Matrix<T>* v = nullptr;
};

template <typename T>
Matrix<T> attention_weights(const Matrix<T>& q, const Matrix<T>& k, bool causal) {
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(q.cols()));
  Matrix<T> scaled = scale(matmul_nt(q, k), inv_sqrt);
  if (causal) return softmax_rows(scaled, CausalMask{scaled.rows()});
  return softmax_rows(scaled);
}

template <typename T>
struct HeadForward {
  Matrix<T> out;
  HeadCache<T> cache;
};

template <typename T>
HeadForward<T> attention_head_forward(const Matrix<T>& a, const AttentionHeadParams<T>& p, bool causal = true,
                                      FeatureOffsets<T> extra = {}) {
  if (p.q.out_features() != p.k.out_features()) {
    throw ShapeError("attention_head_forward: query width " + std::to_string(p.q.out_features()) +
                     " differs from key width " + std::to_string(p.k.out_features()));
  }
  HeadForward<T> result;
  auto& c = result.cache;
  c.input = a;
  c.causal = causal;
  c.q = linear_forward(a, p.q);
  c.k = linear_forward(a, p.k);
  c.v = linear_forward(a, p.v);
  if (extra.q) add_into(c.q, *extra.q);
  if (extra.k) add_into(c.k, *extra.k);
  if (extra.v) add_into(c.v, *extra.v);
  c.rho = attention_weights(c.q, c.k, causal);
  result.out = matmul(c.rho, c.v);
  return result;
}

template <typename T>
struct HeadBackward {
  Matrix<T> delta_in;
  AttentionHeadParams<T> grads;
  // Gradients with respect to the feature maps themselves.
  Matrix<T> d_q, d_k, d_v;
  Matrix<T> delta_causal;
};

template <typename T>
HeadBackward<T> attention_head_backward(const Matrix<T>& delta_out, const HeadCache<T>& c,
                                        const AttentionHeadParams<T>& p) {
  const std::size_t n = c.rho.rows();
  if (delta_out.rows() != n || delta_out.cols() != c.v.cols()) {
    throw ShapeError("attention_head_backward: delta " + delta_out.shape() + " against values " + c.v.shape());
  }
  if (c.input.cols() != p.q.in_features()) {
    throw ShapeError("attention_head_backward: cached input " + c.input.shape() + " against query weights " +
                     p.q.w.shape());
  }
  HeadBackward<T> r;

  // values branch
  r.d_v = matmul_tn(c.rho, delta_out);
  r.grads.v.w = matmul_tn(matmul(c.rho, c.input), delta_out);
  r.grads.v.b = sum_over_tokens(delta_out);
  Matrix<T> delta_v = matmul_nt(r.d_v, p.v.w);

  // attention branch: [G - broadcast(G (-) rho)] o rho with G = delta v^t
  const Matrix<T> g = matmul_nt(delta_out, c.v);
  r.delta_causal = hadamard(subtract(g, broadcast_col(feature_dot(g, c.rho), n)), c.rho);
  const Matrix<T> delta_raw = scale(r.delta_causal, T(1) / std::sqrt(static_cast<T>(c.q.cols())));

  r.d_q = matmul(delta_raw, c.k);
  r.grads.q.w = matmul_tn(c.input, r.d_q);
  r.grads.q.b = sum_over_tokens(r.d_q);
  Matrix<T> delta_q = matmul_nt(r.d_q, p.q.w);

  r.d_k = matmul_tn(delta_raw, c.q);
  r.grads.k.w = matmul_tn(c.input, r.d_k);
  r.grads.k.b = Vector<T>(p.k.b.size());  // keys bias never influences the output
  Matrix<T> delta_k = matmul_nt(r.d_k, p.k.w);

  r.delta_in = std::move(delta_v);
  add_into(r.delta_in, delta_q);
  add_into(r.delta_in, delta_k);
  return r;
}

// ---------------------------------------------------------------------------
// Multi-headed attention: column-wise concat of independent heads.

template <typename T>
struct QKVAdapters {
  const LoRAParams<T>* q = nullptr;
  const LoRAParams<T>* k = nullptr;
  const LoRAParams<T>* v = nullptr;

  bool any() const { return q || k || v; }
};

template <typename T>
struct MhaForward {
  Matrix<T> out;
  std::vector<HeadCache<T>> caches;
};

namespace detail {

template <typename T>
void check_mha(const Matrix<T>& a, const std::vector<AttentionHeadParams<T>>& heads) {
  if (heads.empty()) throw ShapeError("mha: no heads");
  const std::size_t d_h = heads.front().v.out_features();
  for (const auto& h : heads) {
    if (h.v.out_features() != d_h || h.q.out_features() != heads.front().q.out_features()) {
      throw ShapeError("mha: heads disagree on feature widths");
    }
  }
  if (heads.size() * d_h != a.cols()) {
    throw ShapeError("mha: " + std::to_string(heads.size()) + " heads x d_h=" + std::to_string(d_h) +
                     " does not match input width " + std::to_string(a.cols()));
  }
}

}  // namespace detail

template <typename T>
MhaForward<T> mha_forward(const Matrix<T>& a, const std::vector<AttentionHeadParams<T>>& heads, bool causal = true,
                          QKVAdapters<T> adapters = {}) {
  detail::check_mha(a, heads);
  const std::size_t d_h = heads.front().v.out_features();
  const std::size_t d_rho = heads.front().q.out_features();

  std::optional<Matrix<T>> lq, lk, lv;
  if (adapters.q) lq = lora_forward(a, *adapters.q);
  if (adapters.k) lk = lora_forward(a, *adapters.k);
  if (adapters.v) lv = lora_forward(a, *adapters.v);

  MhaForward<T> result;
  result.out = Matrix<T>(a.rows(), heads.size() * d_h);
  result.caches.reserve(heads.size());
  for (std::size_t h = 0; h < heads.size(); ++h) {
    std::optional<Matrix<T>> oq, ok, ov;
    FeatureOffsets<T> extra;
    if (lq) extra.q = &oq.emplace(slice_cols(*lq, h * d_rho, d_rho));
    if (lk) extra.k = &ok.emplace(slice_cols(*lk, h * d_rho, d_rho));
    if (lv) extra.v = &ov.emplace(slice_cols(*lv, h * d_h, d_h));
    auto head = attention_head_forward(a, heads[h], causal, extra);
    set_cols(result.out, h * d_h, head.out);
    result.caches.push_back(std::move(head.cache));
  }
  return result;
}

template <typename T>
struct MhaBackward {
  Matrix<T> delta_in;
  std::vector<AttentionHeadParams<T>> grads;
  std::optional<LoRABackward<T>> lora_q, lora_k, lora_v;
};

template <typename T>
MhaBackward<T> mha_backward(const Matrix<T>& delta, const std::vector<HeadCache<T>>& caches,
                            const std::vector<AttentionHeadParams<T>>& heads, QKVAdapters<T> adapters = {}) {
  if (caches.size() != heads.size() || heads.empty()) throw ShapeError("mha_backward: cache/head count mismatch");
  const std::size_t d_h = heads.front().v.out_features();
  const std::size_t d_rho = heads.front().q.out_features();
  if (delta.cols() != heads.size() * d_h) {
    throw ShapeError("mha_backward: delta " + delta.shape() + " does not split into " +
                     std::to_string(heads.size()) + " heads of width " + std::to_string(d_h));
  }
  const Matrix<T>& input = caches.front().input;

  MhaBackward<T> r;
  r.delta_in = Matrix<T>(input.rows(), input.cols());
  std::optional<Matrix<T>> dq_all, dk_all, dv_all;
  if (adapters.q) dq_all.emplace(input.rows(), heads.size() * d_rho);
  if (adapters.k) dk_all.emplace(input.rows(), heads.size() * d_rho);
  if (adapters.v) dv_all.emplace(input.rows(), heads.size() * d_h);

  r.grads.reserve(heads.size());
  for (std::size_t h = 0; h < heads.size(); ++h) {
    auto hb = attention_head_backward(slice_cols(delta, h * d_h, d_h), caches[h], heads[h]);
    add_into(r.delta_in, hb.delta_in);
    if (dq_all) set_cols(*dq_all, h * d_rho, hb.d_q);
    if (dk_all) set_cols(*dk_all, h * d_rho, hb.d_k);
    if (dv_all) set_cols(*dv_all, h * d_h, hb.d_v);
    r.grads.push_back(std::move(hb.grads));
  }
  auto adapter_pass = [&](const LoRAParams<T>* p, const std::optional<Matrix<T>>& d,
                          std::optional<LoRABackward<T>>& slot) {
    if (!p) return;
    slot = lora_backward(*d, input, *p);
    add_into(r.delta_in, slot->delta_in);
  };
  adapter_pass(adapters.q, dq_all, r.lora_q);
  adapter_pass(adapters.k, dk_all, r.lora_k);
  adapter_pass(adapters.v, dv_all, r.lora_v);
  return r;
}

// ---------------------------------------------------------------------------
// Layer normalization (per-token statistics over the feature axis)

template <typename T>
struct LayerNormForward {
  Matrix<T> out;
  NormCache<T> cache;
};

template <typename T>
LayerNormForward<T> layernorm_forward(const Matrix<T>& a, const LayerNormParams<T>& p) {
  const std::size_t d = a.cols();
  if (d < 2) throw ShapeError("layernorm_forward: need at least 2 features, got " + a.shape());
  if (p.w.size() != d || p.b.size() != d) {
    throw ShapeError("layernorm_forward: parameters of length " + std::to_string(p.w.size()) + " for input " +
                     a.shape());
  }
  LayerNormForward<T> r;
  r.cache.input = a;
  r.cache.normalized = Matrix<T>(a.rows(), d);
  r.cache.sigma = Vector<T>(a.rows());
  r.out = Matrix<T>(a.rows(), d);
  for (std::size_t t = 0; t < a.rows(); ++t) {
    T mu = T(0);
    for (std::size_t f = 0; f < d; ++f) mu += a(t, f);
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t f = 0; f < d; ++f) var += (a(t, f) - mu) * (a(t, f) - mu);
    var /= static_cast<T>(d);
    const T sigma = std::sqrt(var + p.eps);
    r.cache.sigma[t] = sigma;
    for (std::size_t f = 0; f < d; ++f) {
      const T bar = (a(t, f) - mu) / sigma;
      r.cache.normalized(t, f) = bar;
      r.out(t, f) = bar * p.w[f] + p.b[f];
    }
  }
  return r;
}

template <typename T>
struct LayerNormBackward {
  Matrix<T> delta_in;
  Vector<T> grad_w;
  Vector<T> grad_b;
};

/// delta_in row t = (d*g - sum(g) - abar * sum(g o abar)) / (d * sigma_t)
/// with g = w o delta_t. Exact for sigma = sqrt(var + eps).
template <typename T>
LayerNormBackward<T> layernorm_backward(const Matrix<T>& delta, const NormCache<T>& c, const LayerNormParams<T>& p) {
  const std::size_t d = c.normalized.cols();
  if (delta.rows() != c.normalized.rows() || delta.cols() != d || p.w.size() != d) {
    throw ShapeError("layernorm_backward: delta " + delta.shape() + " against cache " + c.normalized.shape());
  }
  LayerNormBackward<T> r;
  r.delta_in = Matrix<T>(delta.rows(), d);
  r.grad_w = Vector<T>(d);
  r.grad_b = sum_over_tokens(delta);
  std::vector<T> g(d);
  for (std::size_t t = 0; t < delta.rows(); ++t) {
    T sum_g = T(0);
    T sum_g_bar = T(0);
    for (std::size_t f = 0; f < d; ++f) {
      g[f] = p.w[f] * delta(t, f);
      sum_g += g[f];
      sum_g_bar += g[f] * c.normalized(t, f);
      r.grad_w[f] += c.normalized(t, f) * delta(t, f);
    }
    const T inv = T(1) / (static_cast<T>(d) * c.sigma[t]);
    for (std::size_t f = 0; f < d; ++f) {
      r.delta_in(t, f) = inv * (static_cast<T>(d) * g[f] - sum_g - c.normalized(t, f) * sum_g_bar);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Elementwise activation

enum class Activation { relu, gelu };

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "' (expected relu or gelu)");
}

inline std::string_view activation_name(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }

namespace detail {

// tanh approximation of GELU and its exact derivative.
template <typename T>
T gelu(T x) {
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T u = c * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

}  // namespace detail

template <typename T>
Matrix<T> activation_forward(const Matrix<T>& a, Activation kind) {
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T x = a.data()[i];
    out.data()[i] = kind == Activation::relu ? (x > T(0) ? x : T(0)) : detail::gelu(x);
  }
  return out;
}

template <typename T>
Matrix<T> activation_backward(const Matrix<T>& delta, const Matrix<T>& cached_input, Activation kind) {
  detail::require_same_shape("activation_backward", delta, cached_input);
  Matrix<T> out(delta.rows(), delta.cols());
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const T x = cached_input.data()[i];
    const T slope = kind == Activation::relu ? (x > T(0) ? T(1) : T(0)) : detail::gelu_grad(x);
    out.data()[i] = delta.data()[i] * slope;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross-entropy over next-token predictions

using Targets = std::vector<std::optional<TokenId>>;

/// Shift-by-one ground truth: position t predicts tokens[t + 1]; the last
/// position has no target.
inline Targets next_token_targets(std::span<const TokenId> tokens) {
  Targets t(tokens.size());
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) t[i] = tokens[i + 1];
  return t;
}

template <typename T>
struct LossForward {
  T loss = T(0);
  Matrix<T> y_pred;
  std::size_t n_contrib = 0;
};

namespace detail {

template <typename T>
std::size_t check_targets(const Matrix<T>& logits, const Targets& targets) {
  if (targets.size() != logits.rows()) {
    throw ShapeError("loss: " + std::to_string(targets.size()) + " targets for logits " + logits.shape());
  }
  std::size_t n = 0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (!targets[t]) continue;
    if (*targets[t] < 0 || static_cast<std::size_t>(*targets[t]) >= logits.cols()) {
      throw std::out_of_range("loss: target " + std::to_string(*targets[t]) + " at position " + std::to_string(t) +
                              " outside vocabulary of " + std::to_string(logits.cols()));
    }
    ++n;
  }
  if (n == 0) throw std::invalid_argument("loss: no position carries a target");
  return n;
}

}  // namespace detail

/// Mean of -log y_pred[t][target_t] over the positions that have a target.
template <typename T>
LossForward<T> loss_forward(const Matrix<T>& logits, const Targets& targets) {
  LossForward<T> r;
  r.n_contrib = detail::check_targets(logits, targets);
  r.y_pred = softmax_rows(logits);
  T total = T(0);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t]) total -= std::log(r.y_pred(t, static_cast<std::size_t>(*targets[t])));
  }
  r.loss = total / static_cast<T>(r.n_contrib);
  return r;
}

template <typename T>
Matrix<T> loss_backward(const Matrix<T>& y_pred, const Targets& targets, std::size_t n_contrib) {
  if (detail::check_targets(y_pred, targets) != n_contrib) {
    throw std::invalid_argument("loss_backward: n_contrib does not match the targets");
  }
  Matrix<T> delta(y_pred.rows(), y_pred.cols());
  const T inv = T(1) / static_cast<T>(n_contrib);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (!targets[t]) continue;
    for (std::size_t v = 0; v < y_pred.cols(); ++v) delta(t, v) = y_pred(t, v) * inv;
    delta(t, static_cast<std::size_t>(*targets[t])) -= inv;
  }
  return delta;
}

}  // namespace gradgpt
