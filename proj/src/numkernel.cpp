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

#include "rac/numkernel.hpp"

#include <cmath>
#include <string>

#include "rac/error.hpp"

namespace rac {

SymMatrix SymMatrix::identity(std::size_t dim, double scale) {
  SymMatrix m(dim);
  for (std::size_t i = 0; i < dim; ++i) m.data_[i * dim + i] = scale;
  return m;
}

SymMatrix SymMatrix::from_rows(std::size_t dim, std::vector<double> data) {
  if (data.size() != dim * dim) {
    throw ValidationError("SymMatrix: expected " + std::to_string(dim * dim) +
                          " entries, got " + std::to_string(data.size()));
  }
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      const double v = data[i * dim + j];
      if (!std::isfinite(v)) throw ValidationError("SymMatrix: non-finite entry");
      if (v != data[j * dim + i]) {
        throw ValidationError("SymMatrix: input is not symmetric at (" +
                              std::to_string(i) + ", " + std::to_string(j) + ")");
      }
    }
  }
  SymMatrix m;
  m.dim_ = dim;
  m.data_ = std::move(data);
  return m;
}

double SymMatrix::mean_diagonal() const {
  if (dim_ == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < dim_; ++i) sum += data_[i * dim_ + i];
  return sum / static_cast<double>(dim_);
}

SymMatrix& SymMatrix::operator+=(const SymMatrix& other) {
  if (other.dim_ != dim_) {
    throw ValidationError("SymMatrix: dimension mismatch in sum (" +
                          std::to_string(dim_) + " vs " +
                          std::to_string(other.dim_) + ")");
  }
  for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += other.data_[k];
  return *this;
}

SymMatrix operator+(SymMatrix lhs, const SymMatrix& rhs) {
  lhs += rhs;
  return lhs;
}

void accumulate_gram(SymMatrix& acc, std::span<const double> column) {
  const std::size_t n = acc.dim();
  if (column.size() != n) {
    throw ValidationError("accumulate_gram: column has " +
                          std::to_string(column.size()) +
                          " entries, accumulator dim is " + std::to_string(n));
  }
  for (double v : column) {
    if (!std::isfinite(v)) {
      throw ValidationError("accumulate_gram: non-finite column entry");
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double ci = column[i];
    if (ci == 0.0) continue;
    for (std::size_t j = i; j < n; ++j) {
      acc.set(i, j, acc(i, j) + ci * column[j]);
    }
  }
}

SymMatrix dampen(const SymMatrix& m, double fraction) {
  if (!(fraction >= 0.0) || !std::isfinite(fraction)) {
    throw ValidationError("dampen: fraction must be finite and >= 0");
  }
  SymMatrix out = m;
  if (fraction == 0.0) return out;
  const double mean = m.mean_diagonal();
  const double add = fraction * (mean == 0.0 ? 1.0 : mean);
  for (std::size_t i = 0; i < m.dim(); ++i) out.set(i, i, out(i, i) + add);
  return out;
}

CholeskyFactor cholesky(const SymMatrix& m) {
  const std::size_t n = m.dim();
  CholeskyFactor f{n, std::vector<double>(n * n, 0.0)};
  auto& l = f.lower;
  for (std::size_t j = 0; j < n; ++j) {
    double pivot = m(j, j);
    for (std::size_t k = 0; k < j; ++k) pivot -= l[j * n + k] * l[j * n + k];
    if (!(pivot > 0.0) || !std::isfinite(pivot)) {
      throw NumericalError("cholesky: non-positive pivot at index " +
                               std::to_string(j) +
                               "; increase the dampening fraction",
                           j);
    }
    const double d = std::sqrt(pivot);
    l[j * n + j] = d;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = s / d;
    }
  }
  return f;
}

SymMatrix reconstruct(const CholeskyFactor& f) {
  const std::size_t n = f.dim;
  SymMatrix out(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k <= j; ++k) s += f(i, k) * f(j, k);
      out.set(i, j, s);
    }
  }
  return out;
}

SymMatrix inverse_via_cholesky(const SymMatrix& m) {
  const CholeskyFactor f = cholesky(m);
  const std::size_t n = f.dim;
  // inv holds L⁻¹ (lower triangular), built column by column by forward
  // substitution.
  std::vector<double> inv(n * n, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    inv[c * n + c] = 1.0 / f(c, c);
    for (std::size_t i = c + 1; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = c; k < i; ++k) s += f(i, k) * inv[k * n + c];
      inv[i * n + c] = -s / f(i, i);
    }
  }
  // m⁻¹ = L⁻ᵀ L⁻¹
  SymMatrix out(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = j; k < n; ++k) s += inv[k * n + i] * inv[k * n + j];
      out.set(i, j, s);
    }
  }
  return out;
}

Matrix upper_cholesky_of_inverse(const SymMatrix& m) {
  const CholeskyFactor f = cholesky(inverse_via_cholesky(m));
  Matrix upper(f.dim, f.dim);
  for (std::size_t i = 0; i < f.dim; ++i) {
    for (std::size_t j = 0; j <= i; ++j) upper(j, i) = f(i, j);
  }
  return upper;
}

SymMatrix submatrix(const SymMatrix& m, std::span<const std::size_t> idx) {
  SymMatrix out(idx.size());
  for (std::size_t a = 0; a < idx.size(); ++a) {
    for (std::size_t b = a; b < idx.size(); ++b) {
      out.set(a, b, m(idx[a], idx[b]));
    }
  }
  return out;
}

}  // namespace rac
