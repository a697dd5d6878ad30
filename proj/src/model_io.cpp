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

#include "rac/model_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>

#include "rac/error.hpp"
#include "rac/hash.hpp"

namespace rac {

namespace {

constexpr char kMagic[8] = {'T', 'M', 'C', 'v', '1', '\0', '\0', '\0'};

struct TensorView {
  std::string name;
  std::vector<std::size_t> shape;
  std::function<std::span<double>()> data;
};

// Fixed tensor order of the container.
std::vector<TensorView> tensor_views(ModelBundle& m) {
  std::vector<TensorView> views;
  const auto add_matrix = [&](std::string name, Matrix& mat) {
    views.push_back({std::move(name), {mat.rows(), mat.cols()},
                     [&mat] { return mat.data(); }});
  };
  const auto add_vector = [&](std::string name, std::vector<double>& v) {
    views.push_back({std::move(name), {v.size()},
                     [&v] { return std::span<double>(v); }});
  };
  add_matrix("token_embedding", m.token_embedding);
  add_matrix("position_embedding", m.position_embedding);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    auto& b = m.blocks[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    add_vector(p + "ln_attn.gain", b.ln_attn.gain);
    add_vector(p + "ln_attn.bias", b.ln_attn.bias);
    add_matrix(p + "attn_q", b.attn_q);
    add_matrix(p + "attn_k", b.attn_k);
    add_matrix(p + "attn_v", b.attn_v);
    add_matrix(p + "attn_out", b.attn_out);
    add_vector(p + "ln_mlp.gain", b.ln_mlp.gain);
    add_vector(p + "ln_mlp.bias", b.ln_mlp.bias);
    add_matrix(p + "mlp_up", b.mlp_up);
    add_matrix(p + "mlp_down", b.mlp_down);
  }
  add_vector("final_norm.gain", m.final_norm.gain);
  add_vector("final_norm.bias", m.final_norm.bias);
  add_matrix("output_projection", m.output_projection);
  return views;
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  }
  return v;
}

void put_f32(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32(const std::string& in, std::size_t at) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) {
    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  }
  return std::bit_cast<float>(bits);
}

ModelBundle zero_bundle(const ModelConfig& c) {
  ModelBundle m;
  m.config = c;
  m.token_embedding = Matrix(c.vocab_size, c.d_model);
  m.position_embedding = Matrix(c.max_positions, c.d_model);
  m.blocks.resize(c.n_layers);
  for (auto& b : m.blocks) {
    b.ln_attn = {std::vector<double>(c.d_model), std::vector<double>(c.d_model)};
    b.ln_mlp = b.ln_attn;
    for (Slot s : kAllSlots) b.slot(s) = Matrix(output_width(c, s), input_width(c, s));
  }
  m.final_norm = {std::vector<double>(c.d_model), std::vector<double>(c.d_model)};
  m.output_projection = Matrix(c.vocab_size, c.d_model);
  return m;
}

std::string blob_of(ModelBundle& m, nlohmann::json* directory) {
  std::string blob;
  for (const auto& view : tensor_views(m)) {
    const auto data = view.data();
    const std::size_t offset = blob.size();
    for (double v : data) put_f32(blob, v);
    if (directory != nullptr) {
      directory->push_back({{"name", view.name},
                            {"shape", view.shape},
                            {"offset", offset},
                            {"length", blob.size() - offset}});
    }
  }
  return blob;
}

}  // namespace

std::string serialize_tmc(const ModelBundle& model) {
  model.validate();
  ModelBundle copy = model;
  nlohmann::json directory = nlohmann::json::array();
  const std::string blob = blob_of(copy, &directory);
  nlohmann::json manifest = {{"format", "TMC"},
                             {"version", 1},
                             {"config", model.config},
                             {"tensors", directory},
                             {"annotations", model.annotations}};
  const std::string text = manifest.dump();
  std::string out(kMagic, sizeof(kMagic));
  put_u64(out, text.size());
  out += text;
  out += blob;
  return out;
}

ModelBundle deserialize_tmc(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError("TMC: bad magic, not a TMC v1 container");
  }
  const std::uint64_t n = get_u64(bytes, 8);
  if (n > bytes.size() - 16) throw IoError("TMC: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, n));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("TMC: manifest is not valid JSON: ") + e.what());
  }
  const std::size_t blob_start = 16 + n;

  ModelBundle m;
  try {
    if (manifest.at("format") != "TMC" || manifest.at("version") != 1) {
      throw IoError("TMC: unsupported format/version");
    }
    m.config = manifest.at("config").get<ModelConfig>();
    if (manifest.contains("annotations")) m.annotations = manifest.at("annotations");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("TMC: malformed manifest: ") + e.what());
  }
  try {
    m.config.validate();
  } catch (const ValidationError& e) {
    throw IoError(std::string("TMC: ") + e.what());
  }

  {
    ModelBundle shaped = zero_bundle(m.config);
    shaped.annotations = std::move(m.annotations);
    m = std::move(shaped);
  }

  std::map<std::string, nlohmann::json> directory;
  std::size_t blob_end = blob_start;
  try {
    for (const auto& entry : manifest.at("tensors")) {
      directory[entry.at("name").get<std::string>()] = entry;
    }
    for (const auto& view : tensor_views(m)) {
      const auto it = directory.find(view.name);
      if (it == directory.end()) throw IoError("TMC: missing tensor " + view.name);
      const auto& entry = it->second;
      if (entry.at("shape").get<std::vector<std::size_t>>() != view.shape) {
        throw IoError("TMC: tensor " + view.name + " has unexpected shape");
      }
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto length = entry.at("length").get<std::size_t>();
      auto data = view.data();
      if (length != data.size() * 4 || blob_start + offset + length > bytes.size()) {
        throw IoError("TMC: tensor " + view.name + " has bad extent");
      }
      for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = static_cast<double>(get_f32(bytes, blob_start + offset + 4 * i));
      }
      blob_end = std::max(blob_end, blob_start + offset + length);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("TMC: malformed tensor directory: ") + e.what());
  }
  if (blob_end != bytes.size()) throw IoError("TMC: trailing bytes after the tensor blob");
  try {
    m.validate();
  } catch (const ValidationError& e) {
    throw IoError(std::string("TMC: ") + e.what());
  }
  return m;
}

void save_tmc(const ModelBundle& model, const std::filesystem::path& path) {
  write_file(path, serialize_tmc(model));
}

ModelBundle load_tmc(const std::filesystem::path& path) {
  return deserialize_tmc(read_file(path));
}

std::string content_hash(const ModelBundle& model) {
  ModelBundle copy = model;
  Fnv1a h;
  h.update(nlohmann::json(model.config).dump());
  h.update(blob_of(copy, nullptr));
  return h.hex();
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("failed reading " + path.string());
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace rac
