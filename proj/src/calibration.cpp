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

#include "rac/calibration.hpp"

#include <bit>
#include <cstring>
#include <string>

#include "rac/error.hpp"
#include "rac/hash.hpp"
#include "rac/model_io.hpp"

#include "parallel.hpp"

namespace rac {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ValidationError(msg);
}

void add_to_sum(std::vector<double>& sum, std::span<const double> column) {
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += column[i];
}

std::string sampler_name(const SamplerSpec& s) {
  if (const auto* t = std::get_if<TemperatureSampler>(&s)) {
    return "temperature:" + nlohmann::json(t->temperature).dump() + ":seed=" +
           std::to_string(t->seed);
  }
  return "greedy";
}

SamplerSpec sampler_for_prompt(const SamplerSpec& s, std::size_t m) {
  if (const auto* t = std::get_if<TemperatureSampler>(&s)) {
    return TemperatureSampler{t->temperature, t->seed + m};
  }
  return s;
}

void check_prompts(std::span<const Tokens> prompts) {
  require(!prompts.empty(), "calibration: prompt list is empty");
  for (std::size_t m = 0; m < prompts.size(); ++m) {
    require(!prompts[m].empty(), "calibration: prompt " + std::to_string(m) + " is empty");
  }
}

Capture sink_into(CalibrationSet& set, bool decode_phase) {
  std::vector<LayerRef> refs;
  for (const auto& [ref, stats] : set.layers) refs.push_back(ref);
  return Capture{std::move(refs),
                 [&set, decode_phase](const LayerRef& ref, std::size_t,
                                      std::span<const double> column) {
                   auto& stats = set.layers.at(ref);
                   if (decode_phase) {
                     stats.add_decode(column);
                   } else {
                     stats.add_prompt(column);
                   }
                 }};
}

}  // namespace

std::string_view mode_name(CalibrationMode mode) {
  switch (mode) {
    case CalibrationMode::corpus: return "corpus";
    case CalibrationMode::prompt_only: return "prompt_only";
    case CalibrationMode::rac: return "rac";
    case CalibrationMode::off_policy: return "off_policy";
  }
  return "?";
}

CalibrationMode parse_mode(std::string_view name) {
  std::string n(name);
  for (char& c : n) {
    if (c == '-') c = '_';
  }
  for (auto m : {CalibrationMode::corpus, CalibrationMode::prompt_only,
                 CalibrationMode::rac, CalibrationMode::off_policy}) {
    if (mode_name(m) == n) return m;
  }
  throw ValidationError("unknown calibration mode '" + std::string(name) +
                        "' (expected corpus, prompt-only, rac or off-policy)");
}

void LayerStats::add_prompt(std::span<const double> column) {
  accumulate_gram(gram_prompt, column);
  add_to_sum(sum_prompt, column);
  ++n_prompt;
}

void LayerStats::add_decode(std::span<const double> column) {
  accumulate_gram(gram_decode, column);
  add_to_sum(sum_decode, column);
  ++n_decode;
}

LayerStats& LayerStats::operator+=(const LayerStats& other) {
  gram_prompt += other.gram_prompt;
  gram_decode += other.gram_decode;
  for (std::size_t i = 0; i < sum_prompt.size(); ++i) {
    sum_prompt[i] += other.sum_prompt[i];
    sum_decode[i] += other.sum_decode[i];
  }
  n_prompt += other.n_prompt;
  n_decode += other.n_decode;
  return *this;
}

const LayerStats& CalibrationSet::at(const LayerRef& ref) const {
  const auto it = layers.find(ref);
  if (it == layers.end()) {
    throw ValidationError("calibration set has no statistics for " + ref.name());
  }
  return it->second;
}

std::size_t CalibrationSet::total_prompt_columns() const {
  return layers.empty() ? 0 : layers.begin()->second.n_prompt;
}

std::size_t CalibrationSet::total_decode_columns() const {
  return layers.empty() ? 0 : layers.begin()->second.n_decode;
}

CalibrationSet& CalibrationSet::operator+=(const CalibrationSet& other) {
  for (const auto& [ref, stats] : other.layers) {
    const auto it = layers.find(ref);
    if (it == layers.end()) {
      layers.emplace(ref, stats);
    } else {
      it->second += stats;
    }
  }
  prompt_hashes.insert(prompt_hashes.end(), other.prompt_hashes.begin(),
                       other.prompt_hashes.end());
  warnings.insert(warnings.end(), other.warnings.begin(), other.warnings.end());
  return *this;
}

CalibrationSet empty_calibration(const ModelBundle& model, std::span<const LayerRef> refs) {
  require(!refs.empty(), "calibration: no layer refs selected");
  CalibrationSet set;
  for (const auto& ref : refs) {
    require(ref.layer < model.config.n_layers,
            "calibration: layer ref " + ref.name() + " out of range");
    set.layers.emplace(ref, LayerStats(input_width(model.config, ref.slot)));
  }
  return set;
}

CalibrationSet collect_prompt_phase(const ModelBundle& model,
                                    std::span<const Tokens> prompts,
                                    std::span<const LayerRef> refs) {
  check_prompts(prompts);
  CalibrationSet set = empty_calibration(model, refs);
  const Capture capture = sink_into(set, /*decode_phase=*/false);
  for (const auto& prompt : prompts) {
    teacher_force(model, prompt, capture);
    set.prompt_hashes.push_back(fnv1a_hex({reinterpret_cast<const char*>(prompt.data()),
                                           prompt.size()}));
  }
  return set;
}

CalibrationSet collect_decode_phase(const ModelBundle& model,
                                    std::span<const Tokens> prompts,
                                    std::span<const LayerRef> refs, std::size_t t_max,
                                    const SamplerSpec& sampler,
                                    const ModelBundle* trace_model) {
  check_prompts(prompts);
  for (const auto& prompt : prompts) {
    require(prompt.size() + t_max <= model.config.max_positions,
            "calibration: prompt length " + std::to_string(prompt.size()) +
                " + t_max " + std::to_string(t_max) + " exceeds max_positions " +
                std::to_string(model.config.max_positions));
  }
  if (trace_model != nullptr) {
    require(trace_model->config.vocab_size == model.config.vocab_size,
            "calibration: trace model vocabulary differs from the target model");
  }
  CalibrationSet set = empty_calibration(model, refs);
  if (t_max == 0) return set;
  const Capture capture = sink_into(set, /*decode_phase=*/true);
  for (std::size_t m = 0; m < prompts.size(); ++m) {
    const auto& prompt = prompts[m];
    const SamplerSpec s = sampler_for_prompt(sampler, m);
    if (trace_model == nullptr) {
      decode(model, prompt, t_max, s, &capture);
    } else {
      const Tokens trace = decode(*trace_model, prompt, t_max, s);
      teacher_force(model, trace, capture, prompt.size());
    }
  }
  return set;
}

CalibrationSet collect_corpus(const ModelBundle& model, std::string_view stream,
                              std::span<const LayerRef> refs, std::size_t token_budget) {
  require(!stream.empty(), "calibration: corpus stream is empty");
  require(token_budget > 0, "calibration: corpus token budget must be positive");
  CalibrationSet set = empty_calibration(model, refs);
  set.mode = CalibrationMode::corpus;
  set.token_budget = token_budget;
  const Capture capture = sink_into(set, /*decode_phase=*/false);
  const std::size_t chunk = model.config.max_positions;
  std::size_t consumed = 0;
  while (consumed < token_budget && consumed < stream.size()) {
    const std::size_t len =
        std::min({chunk, token_budget - consumed, stream.size() - consumed});
    const auto* bytes = reinterpret_cast<const Token*>(stream.data() + consumed);
    teacher_force(model, std::span<const Token>(bytes, len), capture);
    consumed += len;
  }
  if (consumed < token_budget) {
    set.warnings.push_back("corpus stream has " + std::to_string(stream.size()) +
                           " bytes, fewer than the token budget " +
                           std::to_string(token_budget));
  }
  set.prompt_hashes.push_back(fnv1a_hex(stream.substr(0, consumed)));
  return set;
}

SymMatrix merged_gram(const CalibrationSet& set, const LayerRef& ref) {
  const LayerStats& s = set.at(ref);
  return s.gram_prompt + s.gram_decode;
}

void CalibrationConfig::validate(const ModelConfig& model) const {
  require(!refs.empty(), "calibration: no layer refs selected");
  if (mode == CalibrationMode::corpus) {
    require(!corpus.empty(), "calibration: corpus mode needs a nonempty text stream");
    require(token_budget > 0, "calibration: corpus mode needs a positive token budget");
    return;
  }
  require(!prompts.empty(), "calibration: prompt list is empty");
  if (mode == CalibrationMode::rac || mode == CalibrationMode::off_policy) {
    require(t_max > 0, "calibration: mode " + std::string(mode_name(mode)) +
                           " requires t_max > 0");
  }
  if (mode == CalibrationMode::off_policy) {
    require(trace_model != nullptr, "calibration: off_policy mode requires a trace model");
  } else {
    require(trace_model == nullptr,
            "calibration: a trace model is only valid in off_policy mode");
  }
  const std::size_t decode_budget =
      (mode == CalibrationMode::prompt_only) ? 0 : t_max;
  for (std::size_t m = 0; m < prompts.size(); ++m) {
    require(!prompts[m].empty(), "calibration: prompt " + std::to_string(m) + " is empty");
    require(prompts[m].size() + decode_budget <= model.max_positions,
            "calibration: prompt " + std::to_string(m) + " has length " +
                std::to_string(prompts[m].size()) + ", more than max_positions - t_max = " +
                std::to_string(model.max_positions - std::min(decode_budget, model.max_positions)));
  }
}

CalibrationSet calibrate(const ModelBundle& model, const CalibrationConfig& config) {
  config.validate(model.config);

  CalibrationSet set;
  if (config.mode == CalibrationMode::corpus) {
    set = collect_corpus(model, config.corpus, config.refs, config.token_budget);
  } else {
    const bool with_decode = config.mode != CalibrationMode::prompt_only;
    const std::size_t t_max = with_decode ? config.t_max : 0;

    std::span<const Tokens> prompts = config.prompts;
    if (config.token_budget > 0) {
      std::size_t used = 0;
      std::size_t count = 0;
      while (count < prompts.size() && used + prompts[count].size() + t_max <= config.token_budget) {
        used += prompts[count].size() + t_max;
        ++count;
      }
      require(count > 0, "calibration: token budget is smaller than the first prompt");
      prompts = prompts.first(count);
    }

    const std::size_t workers = std::max<std::size_t>(1, std::min(config.threads, prompts.size()));
    std::vector<CalibrationSet> parts(workers);
    detail::parallel_for(workers, workers, [&](std::size_t w) {
      const std::size_t lo = prompts.size() * w / workers;
      const std::size_t hi = prompts.size() * (w + 1) / workers;
      const auto range = prompts.subspan(lo, hi - lo);
      CalibrationSet part = collect_prompt_phase(model, range, config.refs);
      if (with_decode) {
        // Sub-seeds follow the global prompt index, not the worker-local one.
        SamplerSpec sampler = config.sampler;
        if (auto* t = std::get_if<TemperatureSampler>(&sampler)) t->seed += lo;
        part += collect_decode_phase(model, range, config.refs, t_max, sampler,
                                     config.trace_model);
      }
      parts[w] = std::move(part);
    });
    set = std::move(parts[0]);
    for (std::size_t w = 1; w < workers; ++w) set += parts[w];
    if (prompts.size() < config.prompts.size()) {
      set.warnings.push_back("token budget admitted " + std::to_string(prompts.size()) +
                             " of " + std::to_string(config.prompts.size()) + " prompts");
    }
  }

  set.mode = config.mode;
  set.model_hash = content_hash(model);
  if (config.trace_model != nullptr) set.trace_model_hash = content_hash(*config.trace_model);
  set.seed = config.seed;
  set.t_max = config.mode == CalibrationMode::corpus || config.mode == CalibrationMode::prompt_only
                  ? 0
                  : config.t_max;
  set.sampler = sampler_name(config.sampler);
  set.token_budget = config.token_budget;
  return set;
}

std::vector<Tokens> parse_prompts(std::string_view text) {
  std::vector<Tokens> prompts;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) prompts.emplace_back(line.begin(), line.end());
    start = end + 1;
  }
  return prompts;
}

std::vector<Tokens> read_prompts(const std::filesystem::path& path) {
  return parse_prompts(read_file(path));
}

namespace {

constexpr char kCalMagic[8] = {'R', 'A', 'C', 'C', 'A', 'L', '1', '\0'};

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

nlohmann::json put_doubles(std::string& blob, std::span<const double> values) {
  const std::size_t offset = blob.size();
  for (double v : values) put_u64(blob, std::bit_cast<std::uint64_t>(v));
  return {{"offset", offset}, {"length", blob.size() - offset}};
}

std::vector<double> get_doubles(const std::string& bytes, std::size_t blob_start,
                                const nlohmann::json& extent, std::size_t count) {
  const auto offset = extent.at("offset").get<std::size_t>();
  const auto length = extent.at("length").get<std::size_t>();
  if (length != count * 8 || blob_start + offset + length > bytes.size()) {
    throw IoError("calibration file: bad tensor extent");
  }
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = std::bit_cast<double>(get_u64(bytes, blob_start + offset + 8 * i));
  }
  return out;
}

}  // namespace

std::string serialize_calibration(const CalibrationSet& set) {
  std::string blob;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [ref, s] : set.layers) {
    nlohmann::json e = {{"ref", ref.name()},
                        {"dim", s.gram_prompt.dim()},
                        {"n_prompt", s.n_prompt},
                        {"n_decode", s.n_decode}};
    e["gram_prompt"] = put_doubles(blob, s.gram_prompt.data());
    e["gram_decode"] = put_doubles(blob, s.gram_decode.data());
    e["sum_prompt"] = put_doubles(blob, s.sum_prompt);
    e["sum_decode"] = put_doubles(blob, s.sum_decode);
    entries.push_back(std::move(e));
  }
  const nlohmann::json manifest = {{"format", "RACCAL"},
                                   {"version", 1},
                                   {"mode", mode_name(set.mode)},
                                   {"model_hash", set.model_hash},
                                   {"trace_model_hash", set.trace_model_hash},
                                   {"prompt_hashes", set.prompt_hashes},
                                   {"seed", set.seed},
                                   {"t_max", set.t_max},
                                   {"sampler", set.sampler},
                                   {"token_budget", set.token_budget},
                                   {"warnings", set.warnings},
                                   {"n_prompt", set.total_prompt_columns()},
                                   {"n_decode", set.total_decode_columns()},
                                   {"entries", entries}};
  const std::string text = manifest.dump();
  std::string out(kCalMagic, sizeof(kCalMagic));
  put_u64(out, text.size());
  out += text;
  out += blob;
  return out;
}

CalibrationSet deserialize_calibration(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCalMagic, sizeof(kCalMagic)) != 0) {
    throw IoError("calibration file: bad magic");
  }
  const std::uint64_t n = get_u64(bytes, 8);
  if (n > bytes.size() - 16) throw IoError("calibration file: truncated manifest");
  const std::size_t blob_start = 16 + n;
  CalibrationSet set;
  try {
    const auto manifest = nlohmann::json::parse(bytes.substr(16, n));
    if (manifest.at("format") != "RACCAL" || manifest.at("version") != 1) {
      throw IoError("calibration file: unsupported format/version");
    }
    set.mode = parse_mode(manifest.at("mode").get<std::string>());
    manifest.at("model_hash").get_to(set.model_hash);
    manifest.at("trace_model_hash").get_to(set.trace_model_hash);
    manifest.at("prompt_hashes").get_to(set.prompt_hashes);
    manifest.at("seed").get_to(set.seed);
    manifest.at("t_max").get_to(set.t_max);
    manifest.at("sampler").get_to(set.sampler);
    manifest.at("token_budget").get_to(set.token_budget);
    manifest.at("warnings").get_to(set.warnings);
    for (const auto& e : manifest.at("entries")) {
      const LayerRef ref = LayerRef::parse(e.at("ref").get<std::string>());
      const auto dim = e.at("dim").get<std::size_t>();
      LayerStats s(dim);
      s.gram_prompt = SymMatrix::from_rows(dim, get_doubles(bytes, blob_start, e.at("gram_prompt"), dim * dim));
      s.gram_decode = SymMatrix::from_rows(dim, get_doubles(bytes, blob_start, e.at("gram_decode"), dim * dim));
      s.sum_prompt = get_doubles(bytes, blob_start, e.at("sum_prompt"), dim);
      s.sum_decode = get_doubles(bytes, blob_start, e.at("sum_decode"), dim);
      e.at("n_prompt").get_to(s.n_prompt);
      e.at("n_decode").get_to(s.n_decode);
      set.layers.emplace(ref, std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("calibration file: malformed manifest: ") + e.what());
  } catch (const ValidationError& e) {
    throw IoError(std::string("calibration file: ") + e.what());
  }
  return set;
}

void save_calibration(const CalibrationSet& set, const std::filesystem::path& path) {
  write_file(path, serialize_calibration(set));
}

CalibrationSet load_calibration(const std::filesystem::path& path) {
  return deserialize_calibration(read_file(path));
}

}  // namespace rac
