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
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rac/model.hpp"

namespace rac {

// Error of the compressed model's last-block hidden state against the dense
// model's, per position, with both teacher-forced on the same sequence:
// e_t = ||h_dense(z_0..t) - h_compressed(z_0..t)||_2.
std::vector<double> error_trace(const ModelBundle& dense, const ModelBundle& compressed,
                                std::span<const Token> sequence, std::size_t boundary);

inline constexpr double kRatioEpsilon = 1e-12;

// r_t = a_t / b_t per problem and position; missing where b_t < epsilon.
using RatioRow = std::vector<std::optional<double>>;
std::vector<RatioRow> ratio_map(std::span<const std::vector<double>> numerator,
                                std::span<const std::vector<double>> denominator);

struct PhaseErrors {
  std::span<const double> errors;
  std::size_t boundary = 0;  // first decode position
};

struct PhaseSummary {
  std::optional<double> mean_prompt_error;  // mean over t < boundary
  std::optional<double> mean_decode_error;  // mean over t >= boundary
  std::size_t prompt_tokens = 0;
  std::size_t decode_tokens = 0;
};

// Means pooled over every problem; empty phases are reported as missing.
PhaseSummary summarize_phase_errors(std::span<const PhaseErrors> traces);

struct NllReport {
  double mean_nll = 0.0;
  std::size_t tokens = 0;
  std::vector<std::string> warnings;
};

// Teacher-forced mean negative log-likelihood over `budget` predicted
// tokens. The stream is cut into max_positions windows that overlap by one
// byte, so every byte after the first is predicted exactly once.
NllReport eval_nll(const ModelBundle& model, std::string_view stream, std::size_t budget);

// One held-out problem evaluated against several compressed models.
struct DiagnosticTrace {
  std::size_t problem = 0;
  std::size_t prompt_length = 0;  // T_in, the prompt/decode boundary
  Tokens sequence;
  std::vector<std::string> methods;
  std::vector<std::vector<double>> errors;  // per method, per position
};

struct LabeledModel {
  std::string label;
  const ModelBundle* model = nullptr;
};

// Greedy rollout of the dense model on each prompt, then one error trace per
// compressed model.
std::vector<DiagnosticTrace> run_diagnostics(const ModelBundle& dense,
                                             std::span<const LabeledModel> compressed,
                                             std::span<const Tokens> prompts,
                                             std::size_t max_new, std::size_t threads = 1);

// CSV emitters. Numbers are written with 17 significant digits; missing
// ratios are empty cells.
void write_errors_csv(std::ostream& out, std::span<const DiagnosticTrace> traces);
// Ratio of the first method's error to the second's.
void write_ratios_csv(std::ostream& out, std::span<const DiagnosticTrace> traces);

}  // namespace rac
