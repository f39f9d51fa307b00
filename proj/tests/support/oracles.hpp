#pragma once

// Reference implementations written with plain loops over std::vector,
// sharing no code with the library operators they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "gradgpt/matrix.hpp"

namespace gradgpt::testing {

using Grid = std::vector<std::vector<double>>;

inline Grid to_grid(const Matrix<double>& m) {
  Grid g(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) g[i][j] = m(i, j);
  return g;
}

inline Matrix<double> from_grid(const Grid& g) {
  Matrix<double> m(g.size(), g.front().size());
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].size(); ++j) m(i, j) = g[i][j];
  return m;
}

inline Grid naive_matmul(const Grid& a, const Grid& b) {
  Grid c(a.size(), std::vector<double>(b.front().size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.front().size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      c[i][j] = s;
    }
  return c;
}

inline Grid naive_transpose(const Grid& a) {
  Grid t(a.front().size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) t[j][i] = a[i][j];
  return t;
}

/// Explicit one-hot rows, n x n_v.
inline Grid one_hot(const std::vector<int>& ids, std::size_t n_v) {
  Grid g(ids.size(), std::vector<double>(n_v, 0.0));
  for (std::size_t t = 0; t < ids.size(); ++t) g[t][static_cast<std::size_t>(ids[t])] = 1.0;
  return g;
}

inline Matrix<double> random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double std = 1.0) {
  std::normal_distribution<double> normal(0.0, std);
  Matrix<double> m(r, c);
  for (auto& x : m.values()) x = normal(rng);
  return m;
}

inline Vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double std = 1.0) {
  std::normal_distribution<double> normal(0.0, std);
  Vector<double> v(n);
  for (auto& x : v.values()) x = normal(rng);
  return v;
}

inline std::vector<std::size_t> random_permutation(std::mt19937_64& rng, std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

/// P with P(i, perm[i]) = 1, so (P A) row i = A row perm[i].
inline Matrix<double> permutation_matrix(const std::vector<std::size_t>& perm) {
  Matrix<double> p(perm.size(), perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) p(i, perm[i]) = 1.0;
  return p;
}

/// Row-wise softmax over the first `visible(i)` entries of each row.
inline std::vector<double> softmax_prefix(const std::vector<double>& scores, std::size_t visible) {
  std::vector<double> out(scores.size(), 0.0);
  double peak = scores[0];
  for (std::size_t j = 1; j < visible; ++j) peak = std::max(peak, scores[j]);
  double total = 0.0;
  for (std::size_t j = 0; j < visible; ++j) total += std::exp(scores[j] - peak);
  for (std::size_t j = 0; j < visible; ++j) out[j] = std::exp(scores[j] - peak) / total;
  return out;
}

/// Single attention head as explicit per-token weighted sums.
inline Grid loop_attention(const Grid& a, const Grid& wq, const std::vector<double>& bq, const Grid& wk,
                           const std::vector<double>& bk, const Grid& wv, const std::vector<double>& bv, bool causal,
                           Grid* rho_out = nullptr) {
  const std::size_t n = a.size(), d = a[0].size(), dr = wq[0].size(), dh = wv[0].size();
  auto project = [&](const Grid& w, const std::vector<double>& b, std::size_t width) {
    Grid out(n, std::vector<double>(width));
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < width; ++j) {
        double s = b.empty() ? 0.0 : b[j];
        for (std::size_t i = 0; i < d; ++i) s += a[t][i] * w[i][j];
        out[t][j] = s;
      }
    return out;
  };
  const Grid q = project(wq, bq, dr), k = project(wk, bk, dr), v = project(wv, bv, dh);
  Grid out(n, std::vector<double>(dh, 0.0));
  Grid rho(n, std::vector<double>(n, 0.0));
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<double> scores(n, 0.0);
    for (std::size_t u = 0; u < n; ++u) {
      double s = 0.0;
      for (std::size_t j = 0; j < dr; ++j) s += q[t][j] * k[u][j];
      scores[u] = s / std::sqrt(double(dr));
    }
    rho[t] = softmax_prefix(scores, causal ? t + 1 : n);
    for (std::size_t u = 0; u < n; ++u)
      for (std::size_t j = 0; j < dh; ++j) out[t][j] += rho[t][u] * v[u][j];
  }
  if (rho_out) *rho_out = rho;
  return out;
}

/// Batch-norm normalization step: each column standardized over the rows.
inline Grid batchnorm_normalize(const Grid& x, double eps) {
  const std::size_t n = x.size(), f = x[0].size();
  Grid out(n, std::vector<double>(f));
  for (std::size_t j = 0; j < f; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x[i][j];
    mean /= double(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x[i][j] - mean) * (x[i][j] - mean);
    var /= double(n);
    for (std::size_t i = 0; i < n; ++i) out[i][j] = (x[i][j] - mean) / std::sqrt(var + eps);
  }
  return out;
}

inline double max_abs_diff(const Grid& a, const Grid& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  return m;
}

inline std::vector<double> column(const Vector<double>& v) { return {v.values().begin(), v.values().end()}; }

}  // namespace gradgpt::testing
