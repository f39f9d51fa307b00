#pragma once

// Randomized property checks shared by the unit tests and the acceptance
// runner. Each returns the worst deviation observed.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "gradgpt/inference.hpp"
#include "gradgpt/layers.hpp"
#include "gradgpt/model.hpp"
#include "oracles.hpp"

namespace gradgpt::testing {

using M = Matrix<double>;
using V = Vector<double>;

inline std::size_t dim(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

inline double frobenius_cycle_error(std::mt19937_64& rng, int trials) {
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const std::size_t n = dim(rng, 1, 5), m = dim(rng, 1, 5), p = dim(rng, 1, 5), q = dim(rng, 1, 5);
    const M a = random_matrix(rng, n, m), b = random_matrix(rng, n, p), c = random_matrix(rng, p, q),
            d = random_matrix(rng, q, m);
    const double lhs = frobenius_dot(a, matmul(matmul(b, c), d));
    const double mid = frobenius_dot(matmul_tn(matmul(b, c), a), d);
    const double rhs = frobenius_dot(matmul(matmul_tn(b, a), transpose(d)), c);
    worst = std::max({worst, std::abs(lhs - mid), std::abs(lhs - rhs)});
  }
  return worst;
}

inline double transpose_frobenius_error(std::mt19937_64& rng, int trials) {
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const M a = random_matrix(rng, 4, 4), b = random_matrix(rng, 4, 4);
    worst = std::max(worst, std::abs(frobenius_dot(a, transpose(b)) - frobenius_dot(transpose(a), b)));
  }
  return worst;
}

/// (A o B) . col(B (-) C) against [col(A (-) B) o B] . C
inline double broadcast_identity_error(std::mt19937_64& rng, int trials) {
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const M a = random_matrix(rng, 3, 3), b = random_matrix(rng, 3, 3), c = random_matrix(rng, 3, 3);
    const double lhs = frobenius_dot(hadamard(a, b), broadcast_col(feature_dot(b, c), 3));
    const double rhs = frobenius_dot(hadamard(broadcast_col(feature_dot(a, b), 3), b), c);
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  return worst;
}

inline double row_sum_identity_error(std::mt19937_64& rng, int trials) {
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const std::size_t n = dim(rng, 1, 6), k = dim(rng, 1, 6), m = dim(rng, 1, 6);
    const M a = random_matrix(rng, n, k), b = random_matrix(rng, k, m);
    const V lhs = sum_over_tokens(matmul(a, b));
    const V cols = sum_over_tokens(a);
    M row(1, k);
    for (std::size_t j = 0; j < k; ++j) row(0, j) = cols[j];
    const M rhs = matmul(row, b);
    for (std::size_t j = 0; j < m; ++j) worst = std::max(worst, std::abs(lhs[j] - rhs(0, j)));
  }
  return worst;
}

/// Adding any per-row constant leaves every row's softmax unchanged.
inline double softmax_shift_error(std::mt19937_64& rng, int trials) {
  double worst = 0.0;
  std::normal_distribution<double> shift(0.0, 50.0);
  for (int t = 0; t < trials; ++t) {
    const std::size_t n = dim(rng, 1, 6);
    const M a = random_matrix(rng, n, n, 2.0);
    V lambda(n);
    for (auto& x : lambda.values()) x = shift(rng);
    const M shifted = add(a, broadcast_col(lambda, n));
    worst = std::max(worst, max_abs_diff(softmax_rows(shifted), softmax_rows(a)));
    worst = std::max(worst, max_abs_diff(softmax_rows(shifted, CausalMask{n}), softmax_rows(a, CausalMask{n})));
  }
  return worst;
}

inline double softmax_permutation_error(std::mt19937_64& rng, int trials) {
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const std::size_t n = dim(rng, 2, 6), m = dim(rng, 2, 6);
    const M rows_p = permutation_matrix(random_permutation(rng, n));
    const M cols_p = permutation_matrix(random_permutation(rng, m));
    const M a = random_matrix(rng, n, m, 2.0);
    worst = std::max(worst, max_abs_diff(softmax_rows(matmul(rows_p, a)), matmul(rows_p, softmax_rows(a))));
    worst = std::max(worst, max_abs_diff(softmax_rows(matmul(a, cols_p)), matmul(softmax_rows(a), cols_p)));
  }
  return worst;
}

inline AttentionHeadParams<double> random_head(std::mt19937_64& rng, std::size_t d, std::size_t d_rho,
                                               std::size_t d_h, bool with_bias = true) {
  AttentionHeadParams<double> p;
  auto lin = [&](std::size_t out) {
    LinearParams<double> l{random_matrix(rng, d, out, 0.5), V(out)};
    if (with_bias) l.b = random_vector(rng, out, 0.5);
    return l;
  };
  p.q = lin(d_rho);
  p.k = lin(d_rho);
  p.v = lin(d_h);
  return p;
}

struct AttentionInvariants {
  double rho_row_sum = 0.0;
  std::size_t upper_nonzero = 0;
  double delta_causal_row_sum = 0.0;
  std::size_t key_bias_grad_nonzero = 0;
  double key_bias_shift = 0.0;
};

inline AttentionInvariants attention_invariants(std::mt19937_64& rng, int trials) {
  AttentionInvariants r;
  for (int t = 0; t < trials; ++t) {
    const std::size_t n = dim(rng, 1, 8), d = dim(rng, 2, 8), d_rho = dim(rng, 1, 5), d_h = dim(rng, 1, 5);
    const auto p = random_head(rng, d, d_rho, d_h);
    const M a = random_matrix(rng, n, d);
    const auto fwd = attention_head_forward(a, p, true);
    const M& rho = fwd.cache.rho;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        s += rho(i, j);
        if (j > i && rho(i, j) != 0.0) ++r.upper_nonzero;
      }
      r.rho_row_sum = std::max(r.rho_row_sum, std::abs(s - 1.0));
    }
    const auto bwd = attention_head_backward(random_matrix(rng, n, d_h), fwd.cache, p);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += bwd.delta_causal(i, j);
      r.delta_causal_row_sum = std::max(r.delta_causal_row_sum, std::abs(s));
    }
    for (double g : bwd.grads.k.b.values())
      if (g != 0.0) ++r.key_bias_grad_nonzero;

    auto shifted = p;
    shifted.k.b = random_vector(rng, d_rho, 10.0);
    r.key_bias_shift = std::max(r.key_bias_shift, max_abs_diff(attention_head_forward(a, shifted, true).out, fwd.out));
  }
  return r;
}

/// Non-causal head applied to P a against P applied to the head output.
inline double permutation_equivariance_error(std::mt19937_64& rng, int trials) {
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const std::size_t n = dim(rng, 2, 8), d = dim(rng, 2, 8);
    const auto p = random_head(rng, d, dim(rng, 1, 5), dim(rng, 1, 5));
    const M a = random_matrix(rng, n, d);
    const M perm = permutation_matrix(random_permutation(rng, n));
    const M lhs = attention_head_forward(matmul(perm, a), p, false).out;
    const M rhs = matmul(perm, attention_head_forward(a, p, false).out);
    worst = std::max(worst, max_abs_diff(lhs, rhs));
  }
  return worst;
}

/// Two stacked bias-free heads with d_h = d against the explicit double sum
/// over (alpha, beta) of rho2[t][alpha] rho1[alpha][beta] a[beta] w_v1 w_v2.
inline double third_order_error(std::mt19937_64& rng, int trials, std::size_t n_tokens = 4) {
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const std::size_t d = dim(rng, 2, 6), d_rho = dim(rng, 1, 4);
    const auto p1 = random_head(rng, d, d_rho, d, false);
    const auto p2 = random_head(rng, d, d_rho, d, false);
    const M a = random_matrix(rng, n_tokens, d);
    const M library = attention_head_forward(attention_head_forward(a, p1, true).out, p2, true).out;

    const Grid ag = to_grid(a);
    const Grid wq1 = to_grid(p1.q.w), wk1 = to_grid(p1.k.w), wv1 = to_grid(p1.v.w);
    const Grid wq2 = to_grid(p2.q.w), wk2 = to_grid(p2.k.w), wv2 = to_grid(p2.v.w);
    Grid rho1, rho2;
    const Grid mid = loop_attention(ag, wq1, {}, wk1, {}, wv1, {}, true, &rho1);
    loop_attention(mid, wq2, {}, wk2, {}, wv2, {}, true, &rho2);

    Grid expected(n_tokens, std::vector<double>(d, 0.0));
    for (std::size_t ts = 0; ts < n_tokens; ++ts)
      for (std::size_t al = 0; al < n_tokens; ++al)
        for (std::size_t be = 0; be < n_tokens; ++be) {
          const double w = rho2[ts][al] * rho1[al][be];
          if (w == 0.0) continue;
          for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;  // (a_beta w_v1 w_v2)_j
            for (std::size_t k = 0; k < d; ++k) {
              double inner = 0.0;
              for (std::size_t i = 0; i < d; ++i) inner += ag[be][i] * wv1[i][k];
              s += inner * wv2[k][j];
            }
            expected[ts][j] += w * s;
          }
        }
    worst = std::max(worst, max_abs_diff(to_grid(library), expected));
  }
  return worst;
}

/// Layer-norm normalization of A against the transposed batch-norm
/// normalization of A^t.
inline double ln_bn_duality_error(std::mt19937_64& rng, int trials) {
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    std::size_t n = dim(rng, 2, 9), d = dim(rng, 2, 9);
    if (n == d) ++n;
    const double eps = (t % 2 == 0) ? 0.0 : 1e-5;
    const M a = random_matrix(rng, n, d, 2.0);
    const LayerNormParams<double> p{V(d, 1.0), V(d, 0.0), eps};
    const M ln = layernorm_forward(a, p).cache.normalized;
    const Grid bn = naive_transpose(batchnorm_normalize(naive_transpose(to_grid(a)), eps));
    worst = std::max(worst, max_abs_diff(to_grid(ln), bn));
  }
  return worst;
}

struct CacheEquivalence {
  double max_abs_diff = 0.0;
  std::size_t steps = 0;
  std::size_t decode_max_rows = 0;  // largest Matrix allocated inside decode_step
  bool tokens_match = true;
};

/// Greedy decoding through the cache, checking every step's logits against
/// a from-scratch forward of the extended sequence.
inline CacheEquivalence kv_cache_equivalence(const ModelParams<double>& p, const ModelConfig& c,
                                             std::vector<TokenId> prompt, std::size_t steps) {
  CacheEquivalence r;
  auto state = prefill(std::span<const TokenId>(prompt), p, c);
  std::vector<TokenId> seq = prompt;
  Vector<double> logits = state.last_logits;
  for (std::size_t s = 0; s < steps; ++s) {
    const TokenId next = argmax(std::span<const double>(logits.values()));
    seq.push_back(next);
    {
      AllocationProbe probe;
      logits = decode_step(next, state.cache, p, c);
      r.decode_max_rows = std::max(r.decode_max_rows, probe.stats().max_rows);
    }
    const auto full = model_forward(std::span<const TokenId>(seq), p, c).logits;
    for (std::size_t v = 0; v < c.n_vocab; ++v)
      r.max_abs_diff = std::max(r.max_abs_diff, std::abs(logits[v] - full(full.rows() - 1, v)));
    const TokenId naive_next = argmax(full.row(full.rows() - 1));
    if (naive_next != argmax(std::span<const double>(logits.values()))) r.tokens_match = false;
    ++r.steps;
  }
  return r;
}

}  // namespace gradgpt::testing
