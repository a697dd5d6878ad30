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

#include "rac/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "rac/error.hpp"

namespace rac {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ValidationError(msg);
}

void layer_norm(std::span<const double> x, const LayerNormParams& p,
                double eps, std::span<double> out) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = (x[i] - mean) * inv * p.gain[i] + p.bias[i];
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

void check_shape(const Matrix& m, std::size_t rows, std::size_t cols,
                 const std::string& name) {
  require(m.rows() == rows && m.cols() == cols,
          "model: tensor " + name + " has shape [" + std::to_string(m.rows()) +
              ", " + std::to_string(m.cols()) + "], expected [" +
              std::to_string(rows) + ", " + std::to_string(cols) + "]");
  for (double v : m.data()) {
    require(std::isfinite(v), "model: tensor " + name + " has non-finite entries");
  }
}

void check_norm(const LayerNormParams& p, std::size_t d, const std::string& name) {
  require(p.gain.size() == d && p.bias.size() == d,
          "model: norm " + name + " has wrong width");
}

void fill_normal(Matrix& m, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : m.data()) {
    v = static_cast<double>(static_cast<float>(dist(rng) * scale));
  }
}

LayerNormParams unit_norm(std::size_t d) {
  return {std::vector<double>(d, 1.0), std::vector<double>(d, 0.0)};
}

void validate_refs(const ModelConfig& config, std::span<const LayerRef> refs) {
  for (const auto& r : refs) {
    require(r.layer < config.n_layers,
            "model: layer ref " + r.name() + " out of range (n_layers = " +
                std::to_string(config.n_layers) + ")");
  }
}

}  // namespace

void ModelConfig::validate() const {
  require(vocab_size == kByteVocab, "config: vocab_size must be 256 (byte-level)");
  require(d_model > 0, "config: d_model must be positive");
  require(n_layers > 0, "config: n_layers must be positive");
  require(n_heads > 0, "config: n_heads must be positive");
  require(d_mlp > 0, "config: d_mlp must be positive");
  require(max_positions >= 1, "config: max_positions must be >= 1");
  require(layernorm_epsilon > 0.0 && std::isfinite(layernorm_epsilon),
          "config: layernorm_epsilon must be positive");
  require(d_model % n_heads == 0,
          "config: d_model (" + std::to_string(d_model) +
              ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size},
                     {"d_model", c.d_model},
                     {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},
                     {"d_mlp", c.d_mlp},
                     {"max_positions", c.max_positions},
                     {"layernorm_epsilon", c.layernorm_epsilon}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("d_model").get_to(c.d_model);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_mlp").get_to(c.d_mlp);
  j.at("max_positions").get_to(c.max_positions);
  j.at("layernorm_epsilon").get_to(c.layernorm_epsilon);
}

std::string_view slot_name(Slot slot) {
  switch (slot) {
    case Slot::attn_q: return "attn_q";
    case Slot::attn_k: return "attn_k";
    case Slot::attn_v: return "attn_v";
    case Slot::attn_out: return "attn_out";
    case Slot::mlp_up: return "mlp_up";
    case Slot::mlp_down: return "mlp_down";
  }
  return "?";
}

Slot parse_slot(std::string_view name) {
  for (Slot s : kAllSlots) {
    if (slot_name(s) == name) return s;
  }
  throw ValidationError("unknown slot '" + std::string(name) + "'");
}

std::string LayerRef::name() const {
  return "layers." + std::to_string(layer) + "." + std::string(slot_name(slot));
}

LayerRef LayerRef::parse(std::string_view name) {
  constexpr std::string_view prefix = "layers.";
  const auto bad = [&] {
    return ValidationError("malformed layer ref '" + std::string(name) +
                           "', expected layers.<index>.<slot>");
  };
  if (name.substr(0, prefix.size()) != prefix) throw bad();
  const auto rest = name.substr(prefix.size());
  const auto dot = rest.find('.');
  if (dot == std::string_view::npos || dot == 0) throw bad();
  std::size_t layer = 0;
  for (char c : rest.substr(0, dot)) {
    if (c < '0' || c > '9') throw bad();
    layer = layer * 10 + static_cast<std::size_t>(c - '0');
  }
  return {layer, parse_slot(rest.substr(dot + 1))};
}

std::vector<LayerRef> all_refs(const ModelConfig& config, std::span<const Slot> slots) {
  std::vector<LayerRef> refs;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (Slot s : slots) refs.push_back({l, s});
  }
  return refs;
}

std::size_t input_width(const ModelConfig& config, Slot slot) {
  return slot == Slot::mlp_down ? config.d_mlp : config.d_model;
}

std::size_t output_width(const ModelConfig& config, Slot slot) {
  return slot == Slot::mlp_up ? config.d_mlp : config.d_model;
}

Matrix& BlockWeights::slot(Slot s) {
  return const_cast<Matrix&>(std::as_const(*this).slot(s));
}

const Matrix& BlockWeights::slot(Slot s) const {
  switch (s) {
    case Slot::attn_q: return attn_q;
    case Slot::attn_k: return attn_k;
    case Slot::attn_v: return attn_v;
    case Slot::attn_out: return attn_out;
    case Slot::mlp_up: return mlp_up;
    case Slot::mlp_down: return mlp_down;
  }
  throw ValidationError("invalid slot");
}

const Matrix& ModelBundle::weight(const LayerRef& ref) const {
  require(ref.layer < blocks.size(), "model: layer ref " + ref.name() + " out of range");
  return blocks[ref.layer].slot(ref.slot);
}

void ModelBundle::validate() const {
  config.validate();
  const auto d = config.d_model;
  check_shape(token_embedding, config.vocab_size, d, "token_embedding");
  check_shape(position_embedding, config.max_positions, d, "position_embedding");
  require(blocks.size() == config.n_layers, "model: block count differs from n_layers");
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    check_norm(b.ln_attn, d, "ln_attn");
    check_norm(b.ln_mlp, d, "ln_mlp");
    for (Slot s : kAllSlots) {
      check_shape(b.slot(s), output_width(config, s), input_width(config, s),
                  LayerRef{l, s}.name());
    }
  }
  check_norm(final_norm, d, "final_norm");
  check_shape(output_projection, config.vocab_size, d, "output_projection");
}

ModelBundle generate_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  const auto d = config.d_model;

  ModelBundle m;
  m.config = config;
  m.token_embedding = Matrix(config.vocab_size, d);
  m.position_embedding = Matrix(config.max_positions, d);
  fill_normal(m.token_embedding, rng, scale);
  fill_normal(m.position_embedding, rng, scale);
  m.blocks.resize(config.n_layers);
  for (auto& b : m.blocks) {
    b.ln_attn = unit_norm(d);
    b.ln_mlp = unit_norm(d);
    for (Slot s : kAllSlots) {
      b.slot(s) = Matrix(output_width(config, s), input_width(config, s));
      fill_normal(b.slot(s), rng, scale);
    }
  }
  m.final_norm = unit_norm(d);
  m.output_projection = Matrix(config.vocab_size, d);
  fill_normal(m.output_projection, rng, scale);
  return m;
}

ModelBundle apply_compressed(const ModelBundle& model, const LayerRef& ref,
                             const Matrix& weights) {
  const Matrix& current = model.weight(ref);
  require(weights.rows() == current.rows() && weights.cols() == current.cols(),
          "apply_compressed: weights for " + ref.name() + " have shape [" +
              std::to_string(weights.rows()) + ", " + std::to_string(weights.cols()) +
              "], expected [" + std::to_string(current.rows()) + ", " +
              std::to_string(current.cols()) + "]");
  ModelBundle out = model;
  Matrix& target = out.blocks[ref.layer].slot(ref.slot);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double v = weights.data()[i];
    require(std::isfinite(v), "apply_compressed: non-finite weight in " + ref.name());
    target.data()[i] = static_cast<double>(static_cast<float>(v));
  }
  return out;
}

DecodeSession::DecodeSession(const ModelBundle& model)
    : model_(&model),
      keys_(model.config.n_layers),
      values_(model.config.n_layers) {
  const auto& c = model.config;
  out_.logits.resize(c.vocab_size);
  out_.hidden.resize(c.d_model);
  x_.resize(c.d_model);
  h_.resize(c.d_model);
  q_.resize(c.d_model);
  k_.resize(c.d_model);
  v_.resize(c.d_model);
  mix_.resize(c.d_model);
  tmp_.resize(c.d_model);
  up_.resize(c.d_mlp);
  scores_.reserve(c.max_positions);
}

const StepOutput& DecodeSession::feed(Token token, const Capture* capture) {
  const ModelBundle& m = *model_;
  const ModelConfig& c = m.config;
  const std::size_t pos = tokens_.size();
  require(pos < c.max_positions,
          "model: position " + std::to_string(pos) + " exceeds max_positions " +
              std::to_string(c.max_positions));

  const auto emit = [&](std::size_t layer, std::span<const Slot> slots,
                        std::span<const double> column) {
    if (capture == nullptr) return;
    for (const auto& ref : capture->refs) {
      if (ref.layer != layer) continue;
      if (std::find(slots.begin(), slots.end(), ref.slot) != slots.end()) {
        capture->sink(ref, pos, column);
      }
    }
  };
  static constexpr Slot kAttnIn[] = {Slot::attn_q, Slot::attn_k, Slot::attn_v};
  static constexpr Slot kAttnOut[] = {Slot::attn_out};
  static constexpr Slot kMlpIn[] = {Slot::mlp_up};
  static constexpr Slot kMlpOut[] = {Slot::mlp_down};

  const auto d = c.d_model;
  const auto tok = m.token_embedding.row(token);
  const auto pe = m.position_embedding.row(pos);
  for (std::size_t i = 0; i < d; ++i) x_[i] = tok[i] + pe[i];

  const std::size_t hd = c.head_dim();
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const BlockWeights& b = m.blocks[l];

    layer_norm(x_, b.ln_attn, c.layernorm_epsilon, h_);
    emit(l, kAttnIn, h_);
    matvec(b.attn_q, h_, q_);
    matvec(b.attn_k, h_, k_);
    matvec(b.attn_v, h_, v_);
    keys_[l].insert(keys_[l].end(), k_.begin(), k_.end());
    values_[l].insert(values_[l].end(), v_.begin(), v_.end());

    const auto& keys = keys_[l];
    const auto& values = values_[l];
    for (std::size_t head = 0; head < c.n_heads; ++head) {
      const std::size_t off = head * hd;
      scores_.assign(pos + 1, 0.0);
      double max_score = -INFINITY;
      for (std::size_t t = 0; t <= pos; ++t) {
        double s = 0.0;
        for (std::size_t i = 0; i < hd; ++i) s += q_[off + i] * keys[t * d + off + i];
        s *= score_scale;
        scores_[t] = s;
        max_score = std::max(max_score, s);
      }
      double total = 0.0;
      for (double& s : scores_) {
        s = std::exp(s - max_score);
        total += s;
      }
      for (std::size_t i = 0; i < hd; ++i) mix_[off + i] = 0.0;
      for (std::size_t t = 0; t <= pos; ++t) {
        const double p = scores_[t] / total;
        for (std::size_t i = 0; i < hd; ++i) mix_[off + i] += p * values[t * d + off + i];
      }
    }
    emit(l, kAttnOut, mix_);
    matvec(b.attn_out, mix_, tmp_);
    for (std::size_t i = 0; i < d; ++i) x_[i] += tmp_[i];

    layer_norm(x_, b.ln_mlp, c.layernorm_epsilon, h_);
    emit(l, kMlpIn, h_);
    matvec(b.mlp_up, h_, up_);
    for (double& u : up_) u = gelu(u);
    emit(l, kMlpOut, up_);
    matvec(b.mlp_down, up_, tmp_);
    for (std::size_t i = 0; i < d; ++i) x_[i] += tmp_[i];
  }

  std::copy(x_.begin(), x_.end(), out_.hidden.begin());
  layer_norm(x_, m.final_norm, c.layernorm_epsilon, h_);
  matvec(m.output_projection, h_, out_.logits);
  tokens_.push_back(token);
  return out_;
}

ForwardResult forward_teacher_forced(const ModelBundle& model,
                                     std::span<const Token> tokens,
                                     std::span<const LayerRef> capture) {
  require(tokens.size() <= model.config.max_positions,
          "forward: sequence length " + std::to_string(tokens.size()) +
              " exceeds max_positions " + std::to_string(model.config.max_positions));
  validate_refs(model.config, capture);
  ForwardResult result;
  for (const auto& ref : capture) result.captured[ref];
  Capture cap{{capture.begin(), capture.end()},
              [&](const LayerRef& ref, std::size_t, std::span<const double> col) {
                result.captured[ref].emplace_back(col.begin(), col.end());
              }};
  DecodeSession session(model);
  for (Token t : tokens) {
    const auto& out = session.feed(t, capture.empty() ? nullptr : &cap);
    result.logits.push_back(out.logits);
    result.hidden.push_back(out.hidden);
  }
  return result;
}

void teacher_force(const ModelBundle& model, std::span<const Token> tokens,
                   const Capture& capture, std::size_t from_position) {
  require(tokens.size() <= model.config.max_positions,
          "forward: sequence length " + std::to_string(tokens.size()) +
              " exceeds max_positions " + std::to_string(model.config.max_positions));
  validate_refs(model.config, capture.refs);
  DecodeSession session(model);
  for (std::size_t p = 0; p < tokens.size(); ++p) {
    session.feed(tokens[p], p >= from_position ? &capture : nullptr);
  }
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double total = 0.0;
  for (double& v : p) {
    v = std::exp(v - mx);
    total += v;
  }
  for (double& v : p) v /= total;
  return p;
}

namespace {

class TokenSampler {
 public:
  explicit TokenSampler(const SamplerSpec& spec) : spec_(spec) {
    if (const auto* t = std::get_if<TemperatureSampler>(&spec_)) {
      require(t->temperature > 0.0 && std::isfinite(t->temperature),
              "sampler: temperature must be positive");
      rng_.seed(t->seed);
    }
  }

  Token next(std::span<const double> logits) {
    const auto* t = std::get_if<TemperatureSampler>(&spec_);
    if (t == nullptr) return static_cast<Token>(argmax(logits));
    std::vector<double> scaled(logits.begin(), logits.end());
    for (double& v : scaled) v /= t->temperature;
    const auto probs = softmax(scaled);
    const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    double cum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      cum += probs[i];
      if (u < cum) return static_cast<Token>(i);
    }
    return static_cast<Token>(probs.size() - 1);
  }

 private:
  SamplerSpec spec_;
  std::mt19937_64 rng_;
};

}  // namespace

Tokens decode(const ModelBundle& model, std::span<const Token> prompt,
              std::size_t max_new, const SamplerSpec& sampler,
              const Capture* generated_capture) {
  require(!prompt.empty(), "decode: prompt must be nonempty");
  require(prompt.size() + max_new <= model.config.max_positions,
          "decode: prompt length " + std::to_string(prompt.size()) + " + max_new " +
              std::to_string(max_new) + " exceeds max_positions " +
              std::to_string(model.config.max_positions));
  if (generated_capture != nullptr) validate_refs(model.config, generated_capture->refs);

  TokenSampler next_token(sampler);
  DecodeSession session(model);
  for (Token t : prompt) session.feed(t);

  Tokens out(prompt.begin(), prompt.end());
  for (std::size_t i = 0; i < max_new; ++i) {
    const Token tok = next_token.next(session.last().logits);
    out.push_back(tok);
    const bool stop = tok == kStopByte;
    // The final token is only fed when its activations are wanted.
    if (generated_capture != nullptr) {
      session.feed(tok, generated_capture);
    } else if (!stop && i + 1 < max_new) {
      session.feed(tok);
    }
    if (stop) break;
  }
  return out;
}

}  // namespace rac
