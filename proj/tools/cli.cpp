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

#include "cli.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "rac/calibration.hpp"
#include "rac/compress.hpp"
#include "rac/diagnostics.hpp"
#include "rac/error.hpp"
#include "rac/hash.hpp"
#include "rac/model.hpp"
#include "rac/model_io.hpp"

namespace rac::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Sub-seed offsets per phase, all derived from --seed.
constexpr std::uint64_t kSamplerSeedOffset = 1;

std::size_t default_threads() {
  if (const char* env = std::getenv("RAC_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return 1;
}

void require_input(const std::string& path, const char* what) {
  if (path.empty()) throw ValidationError(std::string("missing ") + what + " path");
  if (!fs::exists(path)) throw IoError(std::string(what) + " '" + path + "' does not exist");
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

struct RefSelection {
  std::vector<std::string> slots;
  std::vector<std::size_t> layers;

  void add_to(CLI::App* app) {
    app->add_option("--slots", slots, "Prunable slots (attn_q,attn_k,attn_v,attn_out,mlp_up,mlp_down)")
        ->delimiter(',');
    app->add_option("--layers", layers, "Layer indices (default: all)")->delimiter(',');
  }

  bool given() const { return !slots.empty() || !layers.empty(); }

  std::vector<LayerRef> resolve(const ModelConfig& config) const {
    std::vector<Slot> s;
    for (const auto& name : slots) s.push_back(parse_slot(name));
    if (s.empty()) s.assign(kAllSlots.begin(), kAllSlots.end());
    std::vector<std::size_t> ls = layers;
    if (ls.empty()) {
      for (std::size_t l = 0; l < config.n_layers; ++l) ls.push_back(l);
    }
    std::vector<LayerRef> refs;
    for (std::size_t l : ls) {
      if (l >= config.n_layers) {
        throw ValidationError("layer " + std::to_string(l) + " out of range (model has " +
                              std::to_string(config.n_layers) + ")");
      }
      for (Slot slot : s) refs.push_back({l, slot});
    }
    return refs;
  }
};

// ---------------------------------------------------------------- gen-model

struct GenModelArgs {
  ModelConfig config;
  std::optional<std::size_t> d_mlp;
  std::uint64_t seed = 0;
  std::string out;
};

void cmd_gen_model(const GenModelArgs& a, std::ostream& out) {
  ModelConfig c = a.config;
  c.d_mlp = a.d_mlp.value_or(4 * c.d_model);
  const ModelBundle model = generate_model(c, a.seed);
  ModelBundle annotated = model;
  annotated.annotations["generator"] = {{"seed", a.seed}};
  save_tmc(annotated, a.out);
  out << "wrote " << a.out << "\n"
      << "  d_model=" << c.d_model << " layers=" << c.n_layers << " heads=" << c.n_heads
      << " d_mlp=" << c.d_mlp << " max_positions=" << c.max_positions << " seed=" << a.seed
      << "\n  content_hash=" << content_hash(model) << "\n";
}

// ---------------------------------------------------------------- calibrate

struct CalibrateArgs {
  std::string model;
  std::string mode = "rac";
  std::string prompts;
  std::string corpus;
  std::string trace_model;
  std::size_t t_max = 0;
  std::size_t budget = 0;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  RefSelection refs;
  std::string out;
};

void cmd_calibrate(const CalibrateArgs& a, std::ostream& out) {
  require_input(a.model, "model");
  CalibrationConfig cfg;
  cfg.mode = parse_mode(a.mode);
  if (cfg.mode == CalibrationMode::corpus) {
    require_input(a.corpus, "corpus");
  } else {
    require_input(a.prompts, "prompts file");
  }
  if (cfg.mode == CalibrationMode::off_policy && a.trace_model.empty()) {
    throw ValidationError("--mode off-policy requires --trace-model");
  }
  if (cfg.mode != CalibrationMode::off_policy && !a.trace_model.empty()) {
    throw ValidationError("--trace-model is only valid with --mode off-policy");
  }
  if (!a.trace_model.empty()) require_input(a.trace_model, "trace model");
  if (a.temperature < 0.0) throw ValidationError("--temperature must be >= 0");

  const ModelBundle model = load_tmc(a.model);
  std::optional<ModelBundle> trace;
  if (!a.trace_model.empty()) trace = load_tmc(a.trace_model);

  if (cfg.mode == CalibrationMode::corpus) {
    cfg.corpus = read_file(a.corpus);
  } else {
    cfg.prompts = read_prompts(a.prompts);
  }
  cfg.t_max = a.t_max;
  if (a.temperature > 0.0) {
    cfg.sampler = TemperatureSampler{a.temperature, a.seed + kSamplerSeedOffset};
  }
  cfg.trace_model = trace ? &*trace : nullptr;
  cfg.token_budget = a.budget;
  cfg.refs = a.refs.resolve(model.config);
  cfg.seed = a.seed;
  cfg.threads = a.threads;

  const CalibrationSet set = calibrate(model, cfg);
  save_calibration(set, a.out);
  out << "wrote " << a.out << "\n"
      << "  mode=" << mode_name(set.mode) << " refs=" << set.layers.size()
      << " n_prompt=" << set.total_prompt_columns() << " n_decode=" << set.total_decode_columns()
      << "\n";
  for (const auto& w : set.warnings) out << "  warning: " << w << "\n";
}

// ---------------------------------------------------------------- prune

struct PruneArgs {
  std::string model;
  std::string calib;
  std::string method = "obs";
  std::optional<double> sparsity;
  std::string nm;
  std::optional<int> bits;
  std::size_t group_size = 0;
  bool asymmetric = false;
  std::string mode;
  std::size_t block_size = 32;
  double damp = 0.01;
  RefSelection refs;
  std::string out;
  std::string report;
  bool report_timings = false;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

SparsityPattern pattern_from(const PruneArgs& a) {
  const int given = (a.sparsity ? 1 : 0) + (a.nm.empty() ? 0 : 1) + (a.bits ? 1 : 0);
  if (given != 1) throw ValidationError("give exactly one of --sparsity, --nm, --bits");
  if (a.sparsity) return Unstructured{*a.sparsity};
  if (a.bits) return Quantize{*a.bits, !a.asymmetric, a.group_size};
  const auto colon = a.nm.find(':');
  if (colon == std::string::npos) throw ValidationError("--nm expects n:m, e.g. 2:4");
  try {
    std::size_t used = 0;
    const auto n = std::stoul(a.nm.substr(0, colon), &used);
    if (used != colon) throw std::invalid_argument("n");
    const auto m_text = a.nm.substr(colon + 1);
    const auto m = std::stoul(m_text, &used);
    if (used != m_text.size()) throw std::invalid_argument("m");
    return SemiStructured{n, m};
  } catch (const std::logic_error&) {
    throw ValidationError("--nm expects n:m with integers, got '" + a.nm + "'");
  }
}

SolveMode solve_mode_for(const CalibrationSet& calib) {
  switch (calib.mode) {
    case CalibrationMode::corpus: return SolveMode::corpus;
    case CalibrationMode::prompt_only: return SolveMode::prompt_only;
    case CalibrationMode::rac:
    case CalibrationMode::off_policy: return SolveMode::rac;
  }
  return SolveMode::prompt_only;
}

void cmd_prune(const PruneArgs& a, std::ostream& out) {
  require_input(a.model, "model");
  require_input(a.calib, "calibration file");
  const SparsityPattern pattern = pattern_from(a);
  const Method method = parse_method(a.method);

  const ModelBundle model = load_tmc(a.model);
  const CalibrationSet calib = load_calibration(a.calib);
  const std::string model_hash = content_hash(model);
  if (calib.model_hash != model_hash) {
    throw ValidationError("calibration was collected on model " + calib.model_hash +
                          " but --model has hash " + model_hash);
  }
  const SolveMode mode = a.mode.empty() ? solve_mode_for(calib) : parse_solve_mode(a.mode);

  std::vector<LayerRef> refs;
  if (a.refs.given()) {
    refs = a.refs.resolve(model.config);
  } else {
    for (const auto& [ref, stats] : calib.layers) refs.push_back(ref);
  }

  CompressOptions opts;
  opts.obs.block_size = a.block_size;
  opts.obs.damp_fraction = a.damp;
  opts.threads = a.threads;
  auto [compressed, report] = compress_model(model, calib, mode, method, pattern, refs, opts);

  const json provenance = {{"method", report.method},
                           {"pattern", report.pattern},
                           {"calibration_mode", report.calibration_mode},
                           {"block_size", a.block_size},
                           {"damp_fraction", a.damp},
                           {"seed", a.seed},
                           {"source_model_hash", model_hash},
                           {"calibration",
                            {{"mode", mode_name(calib.mode)},
                             {"seed", calib.seed},
                             {"sampler", calib.sampler},
                             {"t_max", calib.t_max},
                             {"n_prompt", calib.total_prompt_columns()},
                             {"n_decode", calib.total_decode_columns()},
                             {"prompts", calib.prompt_hashes.size()},
                             {"trace_model_hash", calib.trace_model_hash}}}};
  compressed.annotations["compression"] = provenance;
  save_tmc(compressed, a.out);

  json body = report.to_json(a.report_timings);
  body["input_model_hash"] = model_hash;
  body["output_model_hash"] = content_hash(compressed);
  body["seed"] = a.seed;
  body["block_size"] = a.block_size;
  body["damp_fraction"] = a.damp;
  const std::string report_path = a.report.empty() ? a.out + ".report.json" : a.report;
  write_json(report_path, body);

  json log = {{"timestamp", timestamp()}, {"command", "prune"}};
  for (const auto& r : report.refs) log["seconds"][r.ref.name()] = r.seconds;
  write_file(report_path + ".log", log.dump() + "\n");

  double total_loss = 0.0;
  for (const auto& r : report.refs) total_loss += r.loss;
  out << "wrote " << a.out << " and " << report_path << "\n"
      << "  method=" << report.method << " pattern=" << report.pattern
      << " calibration=" << report.calibration_mode << " refs=" << report.refs.size()
      << " total_loss=" << total_loss << "\n"
      << "  input_hash=" << model_hash << " output_hash=" << body["output_model_hash"].get<std::string>()
      << "\n";
}

// ---------------------------------------------------------------- diagnose

struct DiagnoseArgs {
  std::string dense;
  std::vector<std::string> compressed;
  std::string prompts;
  std::size_t max_new = 128;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

json summary_json(const PhaseSummary& s) {
  const auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"mean_prompt_error", opt(s.mean_prompt_error)},
          {"mean_decode_error", opt(s.mean_decode_error)},
          {"prompt_tokens", s.prompt_tokens},
          {"decode_tokens", s.decode_tokens}};
}

void cmd_diagnose(const DiagnoseArgs& a, std::ostream& out) {
  require_input(a.dense, "dense model");
  require_input(a.prompts, "prompts file");
  if (a.compressed.empty()) throw ValidationError("diagnose needs at least one --compressed model");
  if (a.out_dir.empty()) throw ValidationError("missing --out-dir");

  std::vector<std::string> labels;
  std::vector<std::string> paths;
  for (const auto& spec : a.compressed) {
    const auto eq = spec.find('=');
    const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
    std::string label = eq == std::string::npos ? fs::path(spec).stem().string() : spec.substr(0, eq);
    require_input(path, "compressed model");
    // Duplicate labels get a positional suffix so CSV rows stay distinct.
    if (std::find(labels.begin(), labels.end(), label) != labels.end()) {
      label += "#" + std::to_string(labels.size());
    }
    labels.push_back(label);
    paths.push_back(path);
  }

  const ModelBundle dense = load_tmc(a.dense);
  std::vector<ModelBundle> models;
  models.reserve(paths.size());
  for (const auto& p : paths) models.push_back(load_tmc(p));
  std::vector<LabeledModel> labeled;
  for (std::size_t i = 0; i < models.size(); ++i) labeled.push_back({labels[i], &models[i]});
  const auto prompts = read_prompts(a.prompts);

  const auto traces = run_diagnostics(dense, labeled, prompts, a.max_new, a.threads);

  json methods = json::object();
  for (std::size_t m = 0; m < labeled.size(); ++m) {
    std::vector<PhaseErrors> pe;
    for (const auto& tr : traces) pe.push_back({tr.errors[m], tr.prompt_length});
    methods[labels[m]] = summary_json(summarize_phase_errors(pe));
  }
  json hashes = json::object();
  for (std::size_t i = 0; i < models.size(); ++i) hashes[labels[i]] = content_hash(models[i]);
  std::vector<std::string> prompt_hashes;
  for (const auto& p : prompts) {
    prompt_hashes.push_back(fnv1a_hex({reinterpret_cast<const char*>(p.data()), p.size()}));
  }
  json summary = {{"methods", methods},
                  {"config",
                   {{"dense_model_hash", content_hash(dense)},
                    {"compressed_model_hashes", hashes},
                    {"method_order", labels},
                    {"max_new", a.max_new},
                    {"prompt_hashes", prompt_hashes},
                    {"seed", a.seed}}}};

  if (labeled.size() >= 2) {
    std::size_t above[2] = {0, 0};
    std::size_t defined[2] = {0, 0};
    for (const auto& tr : traces) {
      const auto rows = ratio_map(std::span(tr.errors).subspan(0, 1), std::span(tr.errors).subspan(1, 1));
      for (std::size_t t = 0; t < rows[0].size(); ++t) {
        if (!rows[0][t]) continue;
        const int phase = t < tr.prompt_length ? 0 : 1;
        ++defined[phase];
        if (*rows[0][t] > 1.0) ++above[phase];
      }
    }
    const auto frac = [](std::size_t n, std::size_t d) { return d ? json(double(n) / double(d)) : json(nullptr); };
    summary["ratio"] = {{"numerator", labels[0]},
                        {"denominator", labels[1]},
                        {"prompt_fraction_above_one", frac(above[0], defined[0])},
                        {"decode_fraction_above_one", frac(above[1], defined[1])}};
  }

  // Build in a scratch directory, then move into place.
  const fs::path final_dir = a.out_dir;
  const fs::path scratch = final_dir.string() + ".partial-" + std::to_string(::getpid());
  std::error_code ec;
  fs::remove_all(scratch, ec);
  if (!fs::create_directories(scratch, ec) && ec) {
    throw IoError("cannot create " + scratch.string() + ": " + ec.message());
  }
  {
    std::ofstream errors(scratch / "errors.csv", std::ios::binary);
    if (!errors) throw IoError("cannot write errors.csv");
    write_errors_csv(errors, traces);
  }
  if (labeled.size() >= 2) {
    std::ofstream ratios(scratch / "ratios.csv", std::ios::binary);
    if (!ratios) throw IoError("cannot write ratios.csv");
    write_ratios_csv(ratios, traces);
  }
  write_json(scratch / "summary.json", summary);
  if (fs::exists(final_dir)) fs::remove_all(final_dir, ec);
  fs::rename(scratch, final_dir, ec);
  if (ec) throw IoError("cannot move results into " + final_dir.string() + ": " + ec.message());

  out << "wrote " << (final_dir / "errors.csv").string();
  if (labeled.size() >= 2) out << ", ratios.csv";
  out << ", summary.json\n";
  for (const auto& label : labels) {
    const auto& m = methods[label];
    out << "  " << label << ": prompt=" << m["mean_prompt_error"].dump()
        << " decode=" << m["mean_decode_error"].dump() << "\n";
  }
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string model;
  std::string text;
  std::size_t budget = 0;
  std::string out;
};

void cmd_eval(const EvalArgs& a, std::ostream& out) {
  require_input(a.model, "model");
  require_input(a.text, "text file");
  const ModelBundle model = load_tmc(a.model);
  const NllReport r = eval_nll(model, read_file(a.text), a.budget);
  json body = {{"mean_nll", r.mean_nll},
               {"tokens", r.tokens},
               {"budget", a.budget},
               {"model_hash", content_hash(model)},
               {"warnings", r.warnings}};
  if (!a.out.empty()) write_json(a.out, body);
  out << "mean_nll=" << std::setprecision(17) << r.mean_nll << " tokens=" << r.tokens << "\n";
  for (const auto& w : r.warnings) out << "  warning: " << w << "\n";
}

// ---------------------------------------------------------------- --config

// Appends options from a JSON object for every key not already given on the
// command line, so flags take precedence over the file.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    }
  }
  if (path.empty()) return args;
  require_input(path, "config file");
  json cfg;
  try {
    cfg = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("config file " + path + " is not valid JSON: " + e.what());
  }
  if (!cfg.is_object()) throw ValidationError("config file must hold a JSON object");
  const auto given = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
  };
  const auto scalar = [](const json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
  };
  std::vector<std::string> extra;
  for (const auto& [key, value] : cfg.items()) {
    const std::string flag = "--" + key;
    if (key == "config" || given(flag)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) extra.push_back(flag);
    } else if (value.is_array()) {
      for (const auto& v : value) {
        extra.push_back(flag);
        extra.push_back(scalar(v));
      }
    } else if (!value.is_null()) {
      extra.push_back(flag);
      extra.push_back(scalar(value));
    }
  }
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

}  // namespace

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"rac: one-shot pruning and quantization calibrated on prompts and on-policy decodes"};
  app.name("rac");
  app.require_subcommand(1);
  std::string config_path;

  const auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON file of defaults; command-line flags win");
  };
  const std::size_t threads_default = default_threads();

  GenModelArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-model", "Generate a seeded random model (TMC v1)");
  gen_cmd->add_option("--d-model", gen.config.d_model, "Hidden width")->required();
  gen_cmd->add_option("--layers", gen.config.n_layers, "Number of transformer blocks")->required();
  gen_cmd->add_option("--heads", gen.config.n_heads, "Attention heads")->required();
  gen_cmd->add_option("--d-mlp", gen.d_mlp, "MLP width (default 4 * d_model)");
  gen_cmd->add_option("--max-positions", gen.config.max_positions, "Context length")
      ->capture_default_str();
  gen_cmd->add_option("--ln-eps", gen.config.layernorm_epsilon, "LayerNorm epsilon")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Random seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output TMC path")->required();
  add_config(gen_cmd);

  CalibrateArgs cal;
  cal.threads = threads_default;
  auto* cal_cmd = app.add_subcommand("calibrate", "Collect per-layer calibration statistics");
  cal_cmd->add_option("--model", cal.model, "Model to calibrate (TMC)")->required();
  cal_cmd->add_option("--mode", cal.mode, "corpus | prompt-only | rac | off-policy")
      ->capture_default_str();
  cal_cmd->add_option("--prompts", cal.prompts, "Prompt file, one prompt per line");
  cal_cmd->add_option("--corpus", cal.corpus, "Text file for corpus mode");
  cal_cmd->add_option("--trace-model", cal.trace_model, "Model that writes off-policy traces");
  cal_cmd->add_option("--t-max", cal.t_max, "Decode budget per prompt")->capture_default_str();
  cal_cmd->add_option("--budget", cal.budget, "Token budget (required for corpus mode)");
  cal_cmd->add_option("--temperature", cal.temperature, "Sampling temperature, 0 = greedy")
      ->capture_default_str();
  cal_cmd->add_option("--seed", cal.seed, "Random seed")->capture_default_str();
  cal_cmd->add_option("--threads", cal.threads, "Worker threads (env RAC_THREADS)");
  cal.refs.add_to(cal_cmd);
  cal_cmd->add_option("--out", cal.out, "Output calibration file")->required();
  add_config(cal_cmd);

  PruneArgs pr;
  pr.threads = threads_default;
  auto* pr_cmd = app.add_subcommand("prune", "Compress a model against calibration statistics");
  pr_cmd->add_option("--model", pr.model, "Dense model (TMC)")->required();
  pr_cmd->add_option("--calib", pr.calib, "Calibration file")->required();
  pr_cmd->add_option("--method", pr.method, "magnitude | wanda | obs | obs-quant")
      ->capture_default_str();
  pr_cmd->add_option("--sparsity", pr.sparsity, "Unstructured per-row sparsity in [0, 1]");
  pr_cmd->add_option("--nm", pr.nm, "Semi-structured n:m pattern, e.g. 2:4");
  pr_cmd->add_option("--bits", pr.bits, "Quantization bits (2, 3, 4, 8)");
  pr_cmd->add_option("--group-size", pr.group_size, "Quantization group size, 0 = whole row");
  pr_cmd->add_flag("--asymmetric", pr.asymmetric, "Asymmetric quantization grid");
  pr_cmd->add_option("--mode", pr.mode,
                     "Gram fed to the solver: prompt-only | rac | corpus (default from calib)");
  pr_cmd->add_option("--block-size", pr.block_size, "OBS block size")->capture_default_str();
  pr_cmd->add_option("--damp", pr.damp, "Dampening fraction of the mean diagonal")
      ->capture_default_str();
  pr.refs.add_to(pr_cmd);
  pr_cmd->add_option("--out", pr.out, "Output TMC path")->required();
  pr_cmd->add_option("--report", pr.report, "Report JSON path (default <out>.report.json)");
  pr_cmd->add_flag("--report-timings", pr.report_timings, "Include wall time in the report body");
  pr_cmd->add_option("--seed", pr.seed, "Seed recorded in the outputs")->capture_default_str();
  pr_cmd->add_option("--threads", pr.threads, "Worker threads (env RAC_THREADS)");
  add_config(pr_cmd);

  DiagnoseArgs dg;
  dg.threads = threads_default;
  auto* dg_cmd = app.add_subcommand("diagnose", "Tokenwise decode-error diagnostics");
  dg_cmd->add_option("--dense", dg.dense, "Dense model (TMC)")->required();
  dg_cmd->add_option("--compressed", dg.compressed,
                     "label=path of a compressed model; repeat, first two form the ratio")
      ->required();
  dg_cmd->add_option("--prompts", dg.prompts, "Held-out prompt file")->required();
  dg_cmd->add_option("--max-new", dg.max_new, "Greedy rollout length")->capture_default_str();
  dg_cmd->add_option("--out-dir", dg.out_dir, "Output directory")->required();
  dg_cmd->add_option("--seed", dg.seed, "Seed recorded in summary.json")->capture_default_str();
  dg_cmd->add_option("--threads", dg.threads, "Worker threads (env RAC_THREADS)");
  add_config(dg_cmd);

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "Teacher-forced mean NLL on a text file");
  ev_cmd->add_option("--model", ev.model, "Model (TMC)")->required();
  ev_cmd->add_option("--text", ev.text, "Text file")->required();
  ev_cmd->add_option("--budget", ev.budget, "Number of predicted tokens")->required();
  ev_cmd->add_option("--out", ev.out, "Optional JSON report path");
  add_config(ev_cmd);

  try {
    std::vector<std::string> args = expand_config(raw_args);
    std::reverse(args.begin(), args.end());
    try {
      app.parse(args);
    } catch (const CLI::ParseError& e) {
      const int rc = app.exit(e, out, err);
      return rc == 0 ? kOk : kValidation;
    }

    if (*gen_cmd) cmd_gen_model(gen, out);
    if (*cal_cmd) cmd_calibrate(cal, out);
    if (*pr_cmd) cmd_prune(pr, out);
    if (*dg_cmd) cmd_diagnose(dg, out);
    if (*ev_cmd) cmd_eval(ev, out);
    return kOk;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }
}

}  // namespace rac::cli
