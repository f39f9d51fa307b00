#pragma once

// Autoregressive decoding with per-block, per-head key/value stores.
//
// Layer norms, fully-connected layers and skip connections act on each token
// row independently, so the newest token can be pushed through the network
// as a single row. Only attention looks across tokens, and it only needs the
// keys and values of earlier positions, which are cached.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "gradgpt/model.hpp"

namespace gradgpt {

/// Append-only rows of one head's keys (width d_rho) and values (width d_h).
template <typename T>
struct HeadKV {
  std::size_t k_width = 0;
  std::size_t v_width = 0;
  std::vector<T> keys;
  std::vector<T> values;

  std::size_t length() const { return k_width ? keys.size() / k_width : 0; }
  std::span<const T> key(std::size_t t) const { return {keys.data() + t * k_width, k_width}; }
  std::span<const T> value(std::size_t t) const { return {values.data() + t * v_width, v_width}; }
};

template <typename T>
struct KVCache {
  std::vector<std::vector<HeadKV<T>>> blocks;  // [block][head]
  std::size_t length = 0;
};

namespace detail {

template <typename T>
KVCache<T> empty_cache(const ModelConfig& c) {
  KVCache<T> cache;
  cache.blocks.assign(c.n_blocks, std::vector<HeadKV<T>>(c.n_h));
  for (auto& blk : cache.blocks)
    for (auto& h : blk) {
      h.k_width = c.d_rho;
      h.v_width = c.d_h;
    }
  return cache;
}

template <typename T>
void append_rows(std::vector<T>& store, const Matrix<T>& rows) {
  store.insert(store.end(), rows.values().begin(), rows.values().end());
}

template <typename T>
Vector<T> last_row(const Matrix<T>& m) {
  const auto r = m.row(m.rows() - 1);
  return Vector<T>(std::vector<T>(r.begin(), r.end()));
}

/// softmax(q k^t / sqrt(d_rho)) v for one query row against all cached
/// rows, accumulated in position order.
template <typename T>
Matrix<T> attend_one(std::span<const T> q, const HeadKV<T>& kv) {
  const std::size_t len = kv.length();
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(kv.k_width));
  std::vector<T> scores(len);
  T peak = -std::numeric_limits<T>::infinity();
  for (std::size_t t = 0; t < len; ++t) {
    const auto k = kv.key(t);
    T acc = T(0);
    for (std::size_t j = 0; j < kv.k_width; ++j) acc += q[j] * k[j];
    scores[t] = acc * inv_sqrt;
    peak = std::max(peak, scores[t]);
  }
  T total = T(0);
  for (auto& s : scores) {
    s = std::exp(s - peak);
    total += s;
  }
  Matrix<T> out(1, kv.v_width);
  for (std::size_t t = 0; t < len; ++t) {
    const T w = scores[t] / total;
    const auto v = kv.value(t);
    for (std::size_t j = 0; j < kv.v_width; ++j) out(0, j) += w * v[j];
  }
  return out;
}

}  // namespace detail

template <typename T>
struct Prefill {
  KVCache<T> cache;
  Vector<T> last_logits;
};

/// Runs the full forward once and keeps every block/head key and value row.
template <typename T>
Prefill<T> prefill(std::span<const TokenId> tokens, const ModelParams<T>& p, const ModelConfig& c) {
  auto fwd = model_forward(tokens, p, c);  // validates length and ids
  Prefill<T> out;
  out.cache = detail::empty_cache<T>(c);
  for (std::size_t b = 0; b < c.n_blocks; ++b) {
    for (std::size_t h = 0; h < c.n_h; ++h) {
      const auto& hc = fwd.trace.blocks[b].heads[h];
      detail::append_rows(out.cache.blocks[b][h].keys, hc.k);
      detail::append_rows(out.cache.blocks[b][h].values, hc.v);
    }
  }
  out.cache.length = tokens.size();
  out.last_logits = detail::last_row(fwd.logits);
  return out;
}

/// Pushes one token through the network, appending its keys and values.
/// Returns the next-token logits.
template <typename T>
Vector<T> decode_step(TokenId token, KVCache<T>& cache, const ModelParams<T>& p, const ModelConfig& c) {
  if (cache.length + 1 > c.n_context) {
    throw std::invalid_argument("decode_step: cache holds " + std::to_string(cache.length) +
                                " tokens, n_context = " + std::to_string(c.n_context));
  }
  if (cache.blocks.size() != c.n_blocks) throw std::invalid_argument("decode_step: cache/model mismatch");
  const TokenId tok[1] = {token};
  const TokenId pos[1] = {static_cast<TokenId>(cache.length)};
  Matrix<T> x = embedding_forward(std::span<const TokenId>(tok), p.tok);
  add_into(x, embedding_forward(std::span<const TokenId>(pos), p.pos));

  for (std::size_t b = 0; b < c.n_blocks; ++b) {
    const auto& blk = p.blocks[b];
    const Matrix<T> h1 = layernorm_forward(x, blk.ln1).out;

    std::optional<Matrix<T>> lq, lk, lv;
    if (blk.lora.q) lq = lora_forward(h1, *blk.lora.q);
    if (blk.lora.k) lk = lora_forward(h1, *blk.lora.k);
    if (blk.lora.v) lv = lora_forward(h1, *blk.lora.v);

    Matrix<T> heads_out(1, c.n_h * c.d_h);
    for (std::size_t h = 0; h < c.n_h; ++h) {
      const auto& hp = blk.heads[h];
      Matrix<T> q = linear_forward(h1, hp.q);
      Matrix<T> k = linear_forward(h1, hp.k);
      Matrix<T> v = linear_forward(h1, hp.v);
      if (lq) add_into(q, slice_cols(*lq, h * c.d_rho, c.d_rho));
      if (lk) add_into(k, slice_cols(*lk, h * c.d_rho, c.d_rho));
      if (lv) add_into(v, slice_cols(*lv, h * c.d_h, c.d_h));
      auto& kv = cache.blocks[b][h];
      detail::append_rows(kv.keys, k);
      detail::append_rows(kv.values, v);
      set_cols(heads_out, h * c.d_h, detail::attend_one(std::span<const T>(q.row(0)), kv));
    }
    x = add(x, detail::linear_with_adapter(heads_out, blk.att_proj, blk.lora.att_proj));
    const Matrix<T> h2 = layernorm_forward(x, blk.ln2).out;
    const Matrix<T> hidden =
        activation_forward(detail::linear_with_adapter(h2, blk.fc_expand, blk.lora.expand), c.activation);
    x = add(x, detail::linear_with_adapter(hidden, blk.fc_contract, blk.lora.contract));
  }
  ++cache.length;
  const Matrix<T> a11 = layernorm_forward(x, p.ln_final).out;
  return detail::last_row(detail::logits_forward(a11, p));
}

// ---------------------------------------------------------------------------
// Sampling

enum class SamplingStrategy { greedy, temperature, top_k };

struct SamplerSettings {
  SamplingStrategy strategy = SamplingStrategy::greedy;
  double temperature = 1.0;
  std::size_t top_k = 1;
  std::uint64_t seed = 0;
};

inline void validate(const SamplerSettings& s, std::size_t n_vocab) {
  if (!(s.temperature > 0.0)) throw std::invalid_argument("sampler: temperature must be positive");
  if (s.strategy == SamplingStrategy::top_k && (s.top_k < 1 || s.top_k > n_vocab)) {
    throw std::invalid_argument("sampler: top_k must lie in [1, " + std::to_string(n_vocab) + "]");
  }
}

/// Argmax with lowest-index tie-break.
template <typename T>
TokenId argmax(std::span<const T> xs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (xs[i] > xs[best]) best = i;
  return static_cast<TokenId>(best);
}

/// Uniform double in [0, 1) from the top 53 bits, independent of the
/// standard library's distribution implementations.
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

template <typename T>
TokenId sample_token(std::span<const T> logits, const SamplerSettings& s, std::mt19937_64& rng) {
  if (s.strategy == SamplingStrategy::greedy) return argmax(logits);

  const std::size_t n = logits.size();
  std::vector<double> scaled(n);
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    scaled[i] = static_cast<double>(logits[i]) / s.temperature;
    peak = std::max(peak, scaled[i]);
  }
  std::vector<double> prob(n);
  for (std::size_t i = 0; i < n; ++i) prob[i] = std::exp(scaled[i] - peak);

  if (s.strategy == SamplingStrategy::top_k && s.top_k < n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return prob[a] > prob[b]; });
    for (std::size_t i = s.top_k; i < n; ++i) prob[order[i]] = 0.0;
  }
  double total = 0.0;
  for (double pr : prob) total += pr;
  const double u = unit_uniform(rng) * total;
  double acc = 0.0;
  std::size_t last_nonzero = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (prob[i] <= 0.0) continue;
    acc += prob[i];
    last_nonzero = i;
    if (u < acc) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(last_nonzero);
}

/// Prompt followed by n_new sampled tokens.
template <typename T>
std::vector<TokenId> generate(std::span<const TokenId> prompt, std::size_t n_new, const SamplerSettings& sampler,
                              const ModelParams<T>& p, const ModelConfig& c) {
  if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
  if (prompt.size() + n_new > c.n_context) {
    throw std::invalid_argument("generate: prompt of " + std::to_string(prompt.size()) + " plus " +
                                std::to_string(n_new) + " new tokens exceeds n_context = " +
                                std::to_string(c.n_context));
  }
  validate(sampler, c.n_vocab);
  std::vector<TokenId> out(prompt.begin(), prompt.end());
  if (n_new == 0) return out;

  std::mt19937_64 rng(sampler.seed);
  auto state = prefill(prompt, p, c);
  Vector<T> logits = std::move(state.last_logits);
  for (std::size_t i = 0; i < n_new; ++i) {
    const TokenId next = sample_token(std::span<const T>(logits.values()), sampler, rng);
    out.push_back(next);
    if (i + 1 < n_new) logits = decode_step(next, state.cache, p, c);
  }
  return out;
}

}  // namespace gradgpt
