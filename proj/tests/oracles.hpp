/* Copyright 2026 The RAC Toolkit Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

// Independent reference implementations used to check the library. Nothing
// here calls into the code under test beyond reading model weights.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include "rac/matrix.hpp"
#include "rac/model.hpp"
#include "rac/numkernel.hpp"

namespace rac::oracle {

using Vec = std::vector<double>;
using Dense = std::vector<Vec>;  // row-major, rows of equal length

inline Vec mul(const Matrix& w, const Vec& x) {
  Vec y(w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < w.cols(); ++c) s += w(r, c) * x[c];
    y[r] = s;
  }
  return y;
}

inline Vec norm(const Vec& x, const LayerNormParams& p, double eps) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = (x[i] - mean) / std::sqrt(var + eps) * p.gain[i] + p.bias[i];
  }
  return y;
}

struct NaiveForward {
  Dense hidden;  // residual stream after the last block, per position
  Dense logits;
  // Input columns per position for layer 0 mlp_up and for every slot of every
  // layer, keyed [layer][slot][position].
  std::vector<std::vector<Dense>> inputs;
};

// Full-sequence forward pass in matrix form: every position attends over the
// whole prefix recomputed from scratch, no cache.
inline NaiveForward naive_forward(const ModelBundle& m, const Tokens& tokens) {
  const auto& c = m.config;
  const std::size_t n = tokens.size();
  const std::size_t d = c.d_model;
  const std::size_t hd = d / c.n_heads;
  Dense x(n, Vec(d));
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      x[t][i] = m.token_embedding(tokens[t], i) + m.position_embedding(t, i);
    }
  }
  NaiveForward out;
  out.inputs.assign(c.n_layers, std::vector<Dense>(6));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& b = m.blocks[l];
    Dense h(n), q(n), k(n), v(n), mix(n, Vec(d, 0.0));
    for (std::size_t t = 0; t < n; ++t) {
      h[t] = norm(x[t], b.ln_attn, c.layernorm_epsilon);
      q[t] = mul(b.attn_q, h[t]);
      k[t] = mul(b.attn_k, h[t]);
      v[t] = mul(b.attn_v, h[t]);
    }
    for (std::size_t head = 0; head < c.n_heads; ++head) {
      for (std::size_t t = 0; t < n; ++t) {
        Vec a(t + 1);
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0.0;
          for (std::size_t i = head * hd; i < (head + 1) * hd; ++i) dot += q[t][i] * k[s][i];
          a[s] = dot / std::sqrt(static_cast<double>(hd));
        }
        const double mx = *std::max_element(a.begin(), a.end());
        double z = 0.0;
        for (double& e : a) z += (e = std::exp(e - mx));
        for (std::size_t s = 0; s <= t; ++s) {
          for (std::size_t i = head * hd; i < (head + 1) * hd; ++i) {
            mix[t][i] += a[s] / z * v[s][i];
          }
        }
      }
    }
    Dense h2(n), act(n);
    for (std::size_t t = 0; t < n; ++t) {
      const Vec o = mul(b.attn_out, mix[t]);
      for (std::size_t i = 0; i < d; ++i) x[t][i] += o[i];
      h2[t] = norm(x[t], b.ln_mlp, c.layernorm_epsilon);
      act[t] = mul(b.mlp_up, h2[t]);
      for (double& u : act[t]) u = 0.5 * u * std::erfc(-u / std::sqrt(2.0));
      const Vec dn = mul(b.mlp_down, act[t]);
      for (std::size_t i = 0; i < d; ++i) x[t][i] += dn[i];
    }
    out.inputs[l] = {h, h, h, mix, h2, act};
  }
  for (std::size_t t = 0; t < n; ++t) {
    out.hidden.push_back(x[t]);
    out.logits.push_back(mul(m.output_projection, norm(x[t], m.final_norm, c.layernorm_epsilon)));
  }
  return out;
}

inline std::size_t first_max(const Vec& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// Greedy decoding that re-runs the full forward pass for every new token.
inline Tokens naive_greedy(const ModelBundle& m, Tokens seq, std::size_t max_new) {
  for (std::size_t i = 0; i < max_new; ++i) {
    const auto f = naive_forward(m, seq);
    const auto next = static_cast<Token>(first_max(f.logits.back()));
    seq.push_back(next);
    if (next == kStopByte) break;
  }
  return seq;
}

// X Xᵀ from explicitly stored columns.
inline Dense gram_of(const Dense& columns, std::size_t dim) {
  Dense g(dim, Vec(dim, 0.0));
  for (const auto& col : columns) {
    for (std::size_t i = 0; i < dim; ++i) {
      for (std::size_t j = 0; j < dim; ++j) g[i][j] += col[i] * col[j];
    }
  }
  return g;
}

inline Dense to_dense(const SymMatrix& m) {
  Dense d(m.dim(), Vec(m.dim()));
  for (std::size_t i = 0; i < m.dim(); ++i) {
    for (std::size_t j = 0; j < m.dim(); ++j) d[i][j] = m(i, j);
  }
  return d;
}

inline SymMatrix to_sym(const Dense& d) {
  SymMatrix m(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = i; j < d.size(); ++j) m.set(i, j, d[i][j]);
  }
  return m;
}

// Solves A x = b by Gaussian elimination with partial pivoting.
inline Vec solve(Dense a, Vec b) {
  const std::size_t n = b.size();
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    for (std::size_t i = k + 1; i < n; ++i) {
      if (std::abs(a[i][k]) > std::abs(a[p][k])) p = i;
    }
    if (a[p][k] == 0.0) throw std::runtime_error("oracle: singular system");
    std::swap(a[k], a[p]);
    std::swap(b[k], b[p]);
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = a[i][k] / a[k][k];
      for (std::size_t j = k; j < n; ++j) a[i][j] -= f * a[k][j];
      b[i] -= f * b[k];
    }
  }
  Vec x(n);
  for (std::size_t k = n; k-- > 0;) {
    double s = b[k];
    for (std::size_t j = k + 1; j < n; ++j) s -= a[k][j] * x[j];
    x[k] = s / a[k][k];
  }
  return x;
}

inline Dense invert(const Dense& a) {
  const std::size_t n = a.size();
  Dense inv(n, Vec(n));
  for (std::size_t j = 0; j < n; ++j) {
    Vec e(n, 0.0);
    e[j] = 1.0;
    const Vec col = solve(a, e);
    for (std::size_t i = 0; i < n; ++i) inv[i][j] = col[i];
  }
  return inv;
}

// (w - v)ᵀ H (w - v) for one row.
inline double quad_loss(const Vec& w, const Vec& v, const Dense& h) {
  const std::size_t n = w.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) s += (w[i] - v[i]) * h[i][j] * (w[j] - v[j]);
  }
  return s;
}

// ||e||² where e = (w - v)ᵀ X with X given as columns.
inline double materialized_loss(const Vec& w, const Vec& v, const Dense& columns) {
  double s = 0.0;
  for (const auto& col : columns) {
    double e = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) e += (w[i] - v[i]) * col[i];
    s += e * e;
  }
  return s;
}

// Best weights on a fixed support: minimizes (w - v)ᵀ H (w - v) over v with
// v zero off the support, via the normal equations H_SS v_S = H_S,: w.
inline Vec least_squares_on_support(const Vec& w, const Dense& h,
                                    const std::vector<std::size_t>& support) {
  const std::size_t k = support.size();
  Vec v(w.size(), 0.0);
  if (k == 0) return v;
  Dense hs(k, Vec(k));
  Vec rhs(k, 0.0);
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) hs[a][b] = h[support[a]][support[b]];
    for (std::size_t j = 0; j < w.size(); ++j) rhs[a] += h[support[a]][j] * w[j];
  }
  const Vec sol = solve(hs, rhs);
  for (std::size_t a = 0; a < k; ++a) v[support[a]] = sol[a];
  return v;
}

// Minimum loss over every support of the given size.
inline double exhaustive_min_loss(const Vec& w, const Dense& h, std::size_t keep) {
  const std::size_t n = w.size();
  double best = std::numeric_limits<double>::infinity();
  for (unsigned bits = 0; bits < (1u << n); ++bits) {
    if (static_cast<std::size_t>(__builtin_popcount(bits)) != keep) continue;
    std::vector<std::size_t> support;
    for (std::size_t i = 0; i < n; ++i) {
      if (bits & (1u << i)) support.push_back(i);
    }
    best = std::min(best, quad_loss(w, least_squares_on_support(w, h, support), h));
  }
  return best;
}

inline Dense random_columns(std::mt19937_64& rng, std::size_t dim, std::size_t count) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Dense cols(count, Vec(dim));
  for (auto& col : cols) {
    for (double& v : col) v = nd(rng);
  }
  return cols;
}

// Correlated columns: a fixed random mixing of i.i.d. normals, so the Gram is
// far from diagonal.
inline Dense correlated_columns(std::mt19937_64& rng, std::size_t dim, std::size_t count) {
  const Dense mix = random_columns(rng, dim, dim);
  const Dense raw = random_columns(rng, dim, count);
  Dense cols(count, Vec(dim, 0.0));
  for (std::size_t n = 0; n < count; ++n) {
    for (std::size_t i = 0; i < dim; ++i) {
      for (std::size_t j = 0; j < dim; ++j) cols[n][i] += mix[i][j] * raw[n][j];
    }
  }
  return cols;
}

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = nd(rng);
  }
  return m;
}

inline Vec row_of(const Matrix& m, std::size_t r) {
  const auto s = m.row(r);
  return Vec(s.begin(), s.end());
}

}  // namespace rac::oracle
