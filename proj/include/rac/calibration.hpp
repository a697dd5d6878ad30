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
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "rac/model.hpp"
#include "rac/numkernel.hpp"

namespace rac {

enum class CalibrationMode { corpus, prompt_only, rac, off_policy };

std::string_view mode_name(CalibrationMode mode);
// Accepts both "prompt-only" and "prompt_only" spellings.
CalibrationMode parse_mode(std::string_view name);

// Streaming statistics for one prunable weight. Columns are never stored;
// only their Gram matrix and sum.
struct LayerStats {
  SymMatrix gram_prompt;
  SymMatrix gram_decode;
  std::vector<double> sum_prompt;
  std::vector<double> sum_decode;
  std::size_t n_prompt = 0;
  std::size_t n_decode = 0;

  explicit LayerStats(std::size_t dim = 0)
      : gram_prompt(dim), gram_decode(dim), sum_prompt(dim, 0.0), sum_decode(dim, 0.0) {}

  void add_prompt(std::span<const double> column);
  void add_decode(std::span<const double> column);
  LayerStats& operator+=(const LayerStats& other);
  bool operator==(const LayerStats&) const = default;
};

struct CalibrationSet {
  CalibrationMode mode = CalibrationMode::prompt_only;
  std::map<LayerRef, LayerStats> layers;

  // Provenance.
  std::string model_hash;
  std::string trace_model_hash;
  std::vector<std::string> prompt_hashes;
  std::uint64_t seed = 0;
  std::size_t t_max = 0;
  std::string sampler = "greedy";
  std::size_t token_budget = 0;
  std::vector<std::string> warnings;

  // Throws ValidationError for refs not in the set.
  const LayerStats& at(const LayerRef& ref) const;
  // Token counts; every ref sees the same positions, so these are per ref.
  std::size_t total_prompt_columns() const;
  std::size_t total_decode_columns() const;

  // Adds statistics ref by ref; provenance lists are concatenated.
  CalibrationSet& operator+=(const CalibrationSet& other);
  bool operator==(const CalibrationSet&) const = default;
};

// Empty statistics for every ref, sized from the model.
CalibrationSet empty_calibration(const ModelBundle& model, std::span<const LayerRef> refs);

// Prompt phase: teacher-forces each prompt and accumulates every position
// into gram_prompt.
CalibrationSet collect_prompt_phase(const ModelBundle& model,
                                    std::span<const Tokens> prompts,
                                    std::span<const LayerRef> refs);

// Decode phase. With trace_model == nullptr the model samples its own
// continuation and the generated tokens' columns go into gram_decode
// (on-policy). Otherwise trace_model writes the continuation and `model` is
// teacher-forced over it (off-policy). Temperature sampling uses
// seed + prompt index for prompt m.
CalibrationSet collect_decode_phase(const ModelBundle& model,
                                    std::span<const Tokens> prompts,
                                    std::span<const LayerRef> refs, std::size_t t_max,
                                    const SamplerSpec& sampler,
                                    const ModelBundle* trace_model = nullptr);

// Chunks a byte stream into max_positions-long sequences and accumulates
// prompt columns until token_budget columns are consumed.
CalibrationSet collect_corpus(const ModelBundle& model, std::string_view stream,
                              std::span<const LayerRef> refs, std::size_t token_budget);

// Gram of the concatenated prompt and decode columns.
SymMatrix merged_gram(const CalibrationSet& set, const LayerRef& ref);

struct CalibrationConfig {
  CalibrationMode mode = CalibrationMode::prompt_only;
  std::vector<Tokens> prompts;
  std::string corpus;  // corpus mode only
  std::size_t t_max = 0;
  SamplerSpec sampler = GreedySampler{};
  const ModelBundle* trace_model = nullptr;
  // Corpus mode: cap on columns. Other modes: when nonzero, prompts are
  // taken in order while the sum of (prompt length + t_max) fits.
  std::size_t token_budget = 0;
  std::vector<LayerRef> refs;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate(const ModelConfig& model) const;
};

// Runs Phase I for any mode and fills provenance. With threads > 1 prompts
// are split into contiguous ranges whose statistics are merged in order.
CalibrationSet calibrate(const ModelBundle& model, const CalibrationConfig& config);

// One prompt per line; bytes are tokens. Empty lines are skipped and a
// trailing '\r' is dropped.
std::vector<Tokens> parse_prompts(std::string_view text);
std::vector<Tokens> read_prompts(const std::filesystem::path& path);

// Container: 8-byte magic "RACCAL1\0", u64 LE manifest length, JSON
// manifest, then float64 LE blob. Each manifest entry records the ref, dim,
// counts and {offset, length} of gram_prompt, gram_decode, sum_prompt and
// sum_decode.
std::string serialize_calibration(const CalibrationSet& set);
CalibrationSet deserialize_calibration(const std::string& bytes);
void save_calibration(const CalibrationSet& set, const std::filesystem::path& path);
CalibrationSet load_calibration(const std::filesystem::path& path);

}  // namespace rac
