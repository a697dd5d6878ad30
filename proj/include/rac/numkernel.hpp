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

#include <cstddef>
#include <span>
#include <vector>

#include "rac/matrix.hpp"

namespace rac {

// Symmetric matrix stored densely. Every update writes both triangles with
// the same value, so data(i, j) == data(j, i) holds bit-for-bit.
class SymMatrix {
 public:
  SymMatrix() = default;
  explicit SymMatrix(std::size_t dim) : dim_(dim), data_(dim * dim, 0.0) {}

  static SymMatrix identity(std::size_t dim, double scale = 1.0);
  // Builds from a full row-major array; throws ValidationError unless the
  // input is exactly symmetric and finite.
  static SymMatrix from_rows(std::size_t dim, std::vector<double> data);

  std::size_t dim() const noexcept { return dim_; }
  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * dim_ + j];
  }
  // Writes both (i, j) and (j, i).
  void set(std::size_t i, std::size_t j, double v) {
    data_[i * dim_ + j] = v;
    data_[j * dim_ + i] = v;
  }
  std::span<const double> data() const noexcept { return data_; }
  double mean_diagonal() const;

  // Element-wise sum, used to merge prompt and decode statistics.
  SymMatrix& operator+=(const SymMatrix& other);

  bool operator==(const SymMatrix&) const = default;

 private:
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

SymMatrix operator+(SymMatrix lhs, const SymMatrix& rhs);

// Lower-triangular factor L with L Lᵀ equal to the factored matrix.
struct CholeskyFactor {
  std::size_t dim = 0;
  std::vector<double> lower;  // row-major, upper triangle zero

  double operator()(std::size_t i, std::size_t j) const {
    return lower[i * dim + j];
  }
};

// acc += column columnᵀ. Rejects size mismatch and non-finite entries.
void accumulate_gram(SymMatrix& acc, std::span<const double> column);

// Adds fraction * mean(diag) to the diagonal, or fraction * 1 when the mean
// diagonal is zero.
SymMatrix dampen(const SymMatrix& m, double fraction);

// Throws NumericalError carrying the pivot index when a non-positive pivot
// is met.
CholeskyFactor cholesky(const SymMatrix& m);

// Reconstructs L Lᵀ; used to check factors.
SymMatrix reconstruct(const CholeskyFactor& f);

SymMatrix inverse_via_cholesky(const SymMatrix& m);

// Upper factor U of m⁻¹ with m⁻¹ = Uᵀ U, the form consumed by the
// column-sequential solvers. Returned as a row-major dim x dim matrix.
Matrix upper_cholesky_of_inverse(const SymMatrix& m);

// Principal submatrix on the given (sorted) indices.
SymMatrix submatrix(const SymMatrix& m, std::span<const std::size_t> idx);

}  // namespace rac
