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

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"

#include "rac/matrix.hpp"

namespace rac {

using Token = std::uint8_t;
using Tokens = std::vector<Token>;

inline constexpr std::size_t kByteVocab = 256;
// Generation stops after this byte is emitted.
inline constexpr Token kStopByte = 0x00;

struct ModelConfig {
  std::size_t vocab_size = kByteVocab;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_mlp = 256;
  std::size_t max_positions = 256;
  double layernorm_epsilon = 1e-5;

  // Throws ValidationError naming the violated constraint.
  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// The six prunable linear maps of a block. Attention scores, norms,
// embeddings and the output projection are never compressed.
enum class Slot { attn_q, attn_k, attn_v, attn_out, mlp_up, mlp_down };

inline constexpr std::array<Slot, 6> kAllSlots = {
    Slot::attn_q, Slot::attn_k,  Slot::attn_v,
    Slot::attn_out, Slot::mlp_up, Slot::mlp_down};

std::string_view slot_name(Slot slot);
Slot parse_slot(std::string_view name);

struct LayerRef {
  std::size_t layer = 0;
  Slot slot = Slot::attn_q;

  // "layers.<i>.<slot>"
  std::string name() const;
  static LayerRef parse(std::string_view name);

  auto operator<=>(const LayerRef&) const = default;
};

// Every (layer, slot) pair of the config, layer-major.
std::vector<LayerRef> all_refs(const ModelConfig& config,
                               std::span<const Slot> slots = kAllSlots);

std::size_t input_width(const ModelConfig& config, Slot slot);
std::size_t output_width(const ModelConfig& config, Slot slot);

struct LayerNormParams {
  std::vector<double> gain;
  std::vector<double> bias;
  bool operator==(const LayerNormParams&) const = default;
};

struct BlockWeights {
  LayerNormParams ln_attn;
  Matrix attn_q;    // d_model x d_model
  Matrix attn_k;    // d_model x d_model
  Matrix attn_v;    // d_model x d_model
  Matrix attn_out;  // d_model x d_model
  LayerNormParams ln_mlp;
  Matrix mlp_up;    // d_mlp x d_model
  Matrix mlp_down;  // d_model x d_mlp

  Matrix& slot(Slot s);
  const Matrix& slot(Slot s) const;
  bool operator==(const BlockWeights&) const = default;
};

// Weights of a pre-norm decoder-only transformer. Values are held as doubles
// but always representable in 32-bit float, the on-disk precision.
struct ModelBundle {
  ModelConfig config;
  Matrix token_embedding;     // vocab x d_model
  Matrix position_embedding;  // max_positions x d_model
  std::vector<BlockWeights> blocks;
  LayerNormParams final_norm;
  Matrix output_projection;   // vocab x d_model
  // Free-form provenance carried in the container manifest.
  nlohmann::json annotations = nlohmann::json::object();

  const Matrix& weight(const LayerRef& ref) const;
  // Shape and finiteness checks against config.
  void validate() const;

  bool operator==(const ModelBundle&) const = default;
};

// Deterministic random model: matrices drawn N(0, 1) / sqrt(d_model) and
// rounded to float, norms at gain 1 and bias 0.
ModelBundle generate_model(const ModelConfig& config, std::uint64_t seed);

// Returns a copy with one slot replaced. Entries are rounded to float.
ModelBundle apply_compressed(const ModelBundle& model, const LayerRef& ref,
                             const Matrix& weights);

// Receives the input column of a referenced weight at one position.
using CaptureSink = std::function<void(const LayerRef& ref, std::size_t position,
                                       std::span<const double> column)>;

struct Capture {
  std::vector<LayerRef> refs;
  CaptureSink sink;
};

struct StepOutput {
  std::vector<double> logits;  // vocab
  std::vector<double> hidden;  // last block output, before the final norm
};

// Incremental forward pass over one sequence with a per-layer KV cache.
// Teacher forcing and decoding both go through feed(), so both produce
// bit-identical activations for identical token sequences.
class DecodeSession {
 public:
  explicit DecodeSession(const ModelBundle& model);

  // Processes the token at position(), appends it and returns the outputs
  // for that position. Throws ValidationError past max_positions.
  const StepOutput& feed(Token token, const Capture* capture = nullptr);

  std::size_t position() const noexcept { return tokens_.size(); }
  const Tokens& tokens() const noexcept { return tokens_; }
  const StepOutput& last() const noexcept { return out_; }

 private:
  const ModelBundle* model_;
  Tokens tokens_;
  // Per layer: position-major keys/values, d_model wide.
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> values_;
  StepOutput out_;

  std::vector<double> x_, h_, q_, k_, v_, mix_, tmp_, up_, scores_;
};

struct ForwardResult {
  std::vector<std::vector<double>> logits;  // per position
  std::vector<std::vector<double>> hidden;  // per position
  // Per requested ref: one column per position, in position order.
  std::map<LayerRef, std::vector<std::vector<double>>> captured;
};

ForwardResult forward_teacher_forced(const ModelBundle& model,
                                     std::span<const Token> tokens,
                                     std::span<const LayerRef> capture = {});

// Streaming variant: the sink sees columns for positions >= from_position.
void teacher_force(const ModelBundle& model, std::span<const Token> tokens,
                   const Capture& capture, std::size_t from_position = 0);

struct GreedySampler {};
struct TemperatureSampler {
  double temperature = 1.0;
  std::uint64_t seed = 0;
};
using SamplerSpec = std::variant<GreedySampler, TemperatureSampler>;

// Lowest index wins ties.
std::size_t argmax(std::span<const double> v);
std::vector<double> softmax(std::span<const double> logits);

// Returns the prompt followed by at most max_new generated tokens; stops
// early after emitting kStopByte. When capture is given, its sink receives
// the columns of every generated token (the prompt is not captured).
Tokens decode(const ModelBundle& model, std::span<const Token> prompt,
              std::size_t max_new, const SamplerSpec& sampler,
              const Capture* generated_capture = nullptr);

}  // namespace rac
