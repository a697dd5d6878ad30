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
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "rac/calibration.hpp"
#include "rac/matrix.hpp"
#include "rac/model.hpp"
#include "rac/numkernel.hpp"

namespace rac {

// Per-row unstructured sparsity: each row keeps round((1 - sparsity) * cols)
// weights.
struct Unstructured {
  double sparsity = 0.5;
};

// n:m semi-structured: every aligned group of m contiguous input weights
// keeps exactly n (so has m - n zeros). 2:4 removes 2 of every 4.
struct SemiStructured {
  std::size_t n = 2;
  std::size_t m = 4;
};

// Uniform grid per row, or per group of group_size input columns when
// group_size > 0. Symmetric grids use scale = max|w| / (2^(bits-1) - 1).
struct Quantize {
  int bits = 4;
  bool symmetric = true;
  std::size_t group_size = 0;
};

using SparsityPattern = std::variant<Unstructured, SemiStructured, Quantize>;

// Throws ValidationError when the pattern is malformed or does not fit a
// layer of the given input width.
void validate_pattern(const SparsityPattern& pattern, std::size_t input_width);
std::string describe(const SparsityPattern& pattern);
bool is_pruning(const SparsityPattern& pattern);

// Weights kept per row for an unstructured target.
std::size_t kept_per_row(double sparsity, std::size_t cols);

// Keep-mask of a weight matrix; true = weight survives.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t rows, std::size_t cols, bool keep = true)
      : rows_(rows), cols_(cols), keep_(rows * cols, keep ? 1 : 0) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool kept(std::size_t r, std::size_t c) const { return keep_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool keep) { keep_[r * cols_ + c] = keep ? 1 : 0; }
  std::size_t kept_in_row(std::size_t r) const;
  std::size_t pruned_count() const;

  bool operator==(const Mask&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> keep_;
};

struct PruneResult {
  Mask mask;
  Matrix weights;
};

struct ObsOptions {
  std::size_t block_size = 32;
  double damp_fraction = 0.01;
};

// Keeps the largest |w| per row (unstructured) or per aligned m-group (n:m).
// Ties keep the lower column index. Surviving weights are unchanged.
PruneResult prune_magnitude(const Matrix& weights, const SparsityPattern& pattern);

// Scores |w_ij| * sqrt(gram_jj); same selection rule as prune_magnitude and
// no weight update.
PruneResult prune_wanda(const Matrix& weights, const SymMatrix& gram,
                        const SparsityPattern& pattern);

// Blockwise Optimal Brain Surgeon pruning.
//
// The gram is dampened, inverted through Cholesky and refactored as the
// upper factor U of H⁻¹. Columns are visited left to right in blocks of
// block_size. At the start of each block the mask for that block is fixed
// per row using the score w_c² / U_cc² on the current (already compensated)
// weights:
//   * n:m - within each aligned group the m - n lowest scores are pruned;
//   * unstructured - the row's remaining prune quota is ranked over every
//     not-yet-visited column and the ones falling inside the block are
//     pruned, which keeps the per-row count exact.
// Each pruned column c is zeroed and its error w_c / U_cc is propagated to
// the later columns through row c of U.
//
// Per row the sweep result is then compared with the exact joint removal of
// the magnitude-selected weights (least squares on the kept columns, see
// refit_fixed_mask), and the one with the lower (w - ŵ)ᵀ H (w - ŵ) on the
// undampened gram is returned. Ties keep the sweep result.
PruneResult prune_obs(const Matrix& weights, const SymMatrix& gram,
                      const SparsityPattern& pattern, const ObsOptions& options = {});

// Same column sweep with a uniform grid: every weight is rounded to its
// group's grid and the rounding error is propagated. Group scales are fixed
// when the sweep reaches the group's first column.
Matrix quantize_obs(const Matrix& weights, const SymMatrix& gram, const Quantize& pattern,
                    const ObsOptions& options = {});

// Round-to-nearest on the same grid quantize_obs uses, with no compensation.
Matrix quantize_rtn(const Matrix& weights, const Quantize& pattern);

// Per row, the least-squares weights on the mask's support:
// ŵ_S = H_SS⁻¹ H_S,: w. Throws NumericalError if H_SS is not positive
// definite.
Matrix refit_fixed_mask(const Matrix& weights, const SymMatrix& gram, const Mask& mask);

// Σ_rows (w - ŵ)ᵀ H (w - ŵ), equal to ||(W - Ŵ) X||²_F when H = X Xᵀ.
double trace_loss(const Matrix& original, const Matrix& compressed, const SymMatrix& gram);

enum class Method { magnitude, wanda, obs, obs_quant };
std::string_view method_name(Method method);
Method parse_method(std::string_view name);

// Gram used by the solver: gram_prompt for prompt_only / corpus, the merged
// prompt + decode Gram for rac (and off_policy).
enum class SolveMode { prompt_only, rac, corpus };
std::string_view solve_mode_name(SolveMode mode);
SolveMode parse_solve_mode(std::string_view name);

struct MaskAudit {
  // Unstructured: target and observed kept-per-row range.
  std::size_t target_kept_per_row = 0;
  std::size_t min_kept_per_row = 0;
  std::size_t max_kept_per_row = 0;
  // n:m: number of aligned groups and how many have exactly m - n zeros.
  std::size_t groups = 0;
  std::size_t exact_groups = 0;
};

struct RefReport {
  LayerRef ref;
  double loss = 0.0;
  double baseline_loss = 0.0;  // ||W X||² of pruning everything; scale reference
  double achieved_sparsity = 0.0;
  std::optional<MaskAudit> audit;
  double seconds = 0.0;
};

struct CompressionReport {
  std::string method;
  std::string pattern;
  std::string calibration_mode;
  std::vector<RefReport> refs;  // in ref order

  // Wall time is kept out of the body unless asked for, so that reruns
  // produce identical bytes.
  nlohmann::json to_json(bool include_timing = false) const;
};

struct CompressOptions {
  ObsOptions obs;
  std::size_t threads = 1;
};

MaskAudit audit_mask(const Mask& mask, const SparsityPattern& pattern);

// Compresses each ref independently against the original weights and
// stitches the results into a copy of the model.
std::pair<ModelBundle, CompressionReport> compress_model(
    const ModelBundle& model, const CalibrationSet& calib, SolveMode mode, Method method,
    const SparsityPattern& pattern, std::span<const LayerRef> refs,
    const CompressOptions& options = {});

}  // namespace rac
