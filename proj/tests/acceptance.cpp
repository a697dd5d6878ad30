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

// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <unistd.h>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>

#include "cli.hpp"
#include "oracles.hpp"
#include "rac/calibration.hpp"
#include "rac/compress.hpp"
#include "rac/diagnostics.hpp"
#include "rac/hash.hpp"
#include "rac/model_io.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace rac;
using rac::testing::make_prompts;
using rac::testing::small_config;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), format, args...);
  return buf;
}

SymMatrix gram_from(const oracle::Dense& cols, std::size_t dim) {
  SymMatrix g(dim);
  for (const auto& c : cols) accumulate_gram(g, c);
  return g;
}

Outcome obs_sandwich() {
  std::mt19937_64 rng(101);
  int violations = 0;
  double worst = -1e300;
  for (int i = 0; i < 100; ++i) {
    const auto cols = i % 2 == 0 ? oracle::random_columns(rng, 6, 32)
                                 : oracle::correlated_columns(rng, 6, 32);
    const SymMatrix gram = gram_from(cols, 6);
    const Matrix w = oracle::random_matrix(rng, 1, 6);

    // Exhaustive optimum: refit on every 3-of-6 support.
    double best = std::numeric_limits<double>::infinity();
    for (unsigned bits = 0; bits < 64; ++bits) {
      if (std::popcount(bits) != 3) continue;
      Mask mask(1, 6, false);
      for (std::size_t c = 0; c < 6; ++c) mask.set(0, c, (bits >> c) & 1u);
      best = std::min(best, trace_loss(w, refit_fixed_mask(w, gram, mask), gram));
    }
    const double obs = trace_loss(w, prune_obs(w, gram, Unstructured{0.5}).weights, gram);
    const double mag = trace_loss(w, prune_magnitude(w, Unstructured{0.5}).weights, gram);
    if (best > obs + 1e-9 || obs > mag + 1e-9) ++violations;
    worst = std::max({worst, best - obs, obs - mag});
  }
  return {violations == 0, fmt("%d/100 violations, worst margin %.3g", violations, worst)};
}

Outcome single_weight_closed_form() {
  std::mt19937_64 rng(202);
  const std::size_t d = 8;
  std::uniform_int_distribution<std::size_t> pick(0, d - 1);
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    const SymMatrix gram = gram_from(oracle::correlated_columns(rng, d, 32), d);
    Matrix w = oracle::random_matrix(rng, 1, d);
    const std::size_t q = pick(rng);
    w(0, q) = 1e-6;
    const auto r = prune_obs(w, gram, Unstructured{1.0 / d}, {32, 0.0});
    if (r.mask.kept(0, q)) return {false, fmt("instance %d pruned the wrong weight", i)};
    const auto hinv = oracle::invert(oracle::to_dense(gram));
    for (std::size_t j = 0; j < d; ++j) {
      const double expected = w(0, j) - w(0, q) / hinv[q][q] * hinv[j][q];
      worst = std::max(worst, std::abs(r.weights(0, j) - expected));
    }
  }
  return {worst <= 1e-8, fmt("50 instances, max |dw - closed form| = %.3g", worst)};
}

Outcome identity_degeneracies() {
  std::mt19937_64 rng(303);
  int obs_ok = 0, quant_ok = 0, wanda_ok = 0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t cols = 8 * (1 + i % 4);
    const Matrix w = oracle::random_matrix(rng, 6, cols);
    const SymMatrix id = SymMatrix::identity(cols);
    const SparsityPattern p = i % 2 == 0 ? SparsityPattern{Unstructured{0.5}}
                                         : SparsityPattern{SemiStructured{2, 4}};
    const auto obs = prune_obs(w, id, p, {8, 0.01});
    const auto mag = prune_magnitude(w, p);
    const auto wanda = prune_wanda(w, id, p);
    obs_ok += obs.mask == mag.mask && obs.weights == mag.weights;
    wanda_ok += wanda.mask == mag.mask && wanda.weights == mag.weights;
    const Quantize q{2 + i % 3, i % 2 == 0, i % 3 == 0 ? 0u : 8u};
    quant_ok += quantize_obs(w, id, q) == quantize_rtn(w, q);
  }
  return {obs_ok == 20 && quant_ok == 20 && wanda_ok == 20,
          fmt("obs==magnitude %d/20, quantize_obs==rtn %d/20, wanda==magnitude %d/20", obs_ok,
              quant_ok, wanda_ok)};
}

Outcome gram_concatenation() {
  const auto model = generate_model(small_config(16, 2, 2, 128), 404);
  const auto prompts = make_prompts(405, 4);
  CalibrationConfig cfg;
  cfg.mode = CalibrationMode::rac;
  cfg.prompts = prompts;
  cfg.t_max = 16;
  cfg.refs = all_refs(model.config);
  const auto set = calibrate(model, cfg);
  std::vector<oracle::NaiveForward> forwards;
  for (const auto& p : prompts) forwards.push_back(oracle::naive_forward(model, oracle::naive_greedy(model, p, 16)));
  double worst = 0.0;
  for (const auto& ref : cfg.refs) {
    oracle::Dense cols;
    for (const auto& f : forwards) {
      for (const auto& c : f.inputs[ref.layer][static_cast<int>(ref.slot)]) cols.push_back(c);
    }
    const auto want = oracle::gram_of(cols, input_width(model.config, ref.slot));
    const auto got = merged_gram(set, ref);
    for (std::size_t i = 0; i < got.dim(); ++i) {
      for (std::size_t j = 0; j < got.dim(); ++j) {
        worst = std::max(worst, std::abs(got(i, j) - want[i][j]));
      }
    }
  }
  return {worst <= 1e-6, fmt("%zu refs, max |merged - materialized| = %.3g", cfg.refs.size(), worst)};
}

Outcome kv_cache() {
  int identical = 0;
  for (std::uint64_t i = 0; i < 10; ++i) {
    const auto model = generate_model(small_config(16 + 8 * (i % 3), 2, 2, 128), 500 + i);
    const Tokens prompt = make_prompts(600 + i, 1)[0];
    const auto cached = decode(model, prompt, 64, GreedySampler{});
    identical += cached == oracle::naive_greedy(model, prompt, 64);
  }
  return {identical == 10, fmt("%d/10 pairs token-identical", identical)};
}

Outcome decode_error_map() {
  const std::size_t configs = 20;
  std::size_t wins = 0, above = 0, decode_tokens = 0;
  for (std::uint64_t k = 0; k < configs; ++k) {
    ModelConfig c;
    c.d_model = 64;
    c.n_layers = 4;
    c.n_heads = 4;
    c.d_mlp = 256;
    c.max_positions = 256;
    const auto model = generate_model(c, 1000 + k);
    CalibrationConfig cfg;
    cfg.mode = CalibrationMode::rac;
    cfg.prompts = make_prompts(2 * k + 1, 8);
    cfg.t_max = 128;
    cfg.refs = all_refs(c);
    const auto set = calibrate(model, cfg);
    const auto prompt_only = compress_model(model, set, SolveMode::prompt_only, Method::obs,
                                            Unstructured{0.5}, cfg.refs).first;
    const auto rac = compress_model(model, set, SolveMode::rac, Method::obs, Unstructured{0.5},
                                    cfg.refs).first;
    const LabeledModel labeled[] = {{"prompt-only", &prompt_only}, {"rac", &rac}};
    const auto held_out = make_prompts(2 * k + 2 + 100000, 8);
    const auto traces = run_diagnostics(model, labeled, held_out, 128);
    std::vector<PhaseErrors> po, ra;
    for (const auto& t : traces) {
      po.push_back({t.errors[0], t.prompt_length});
      ra.push_back({t.errors[1], t.prompt_length});
      const auto ratios = ratio_map(std::span(t.errors).subspan(0, 1), std::span(t.errors).subspan(1, 1));
      for (std::size_t s = t.prompt_length; s < t.sequence.size(); ++s) {
        ++decode_tokens;
        if (ratios[0][s] && *ratios[0][s] > 1.0) ++above;
      }
    }
    const auto a = summarize_phase_errors(po);
    const auto b = summarize_phase_errors(ra);
    if (a.mean_decode_error && b.mean_decode_error && *b.mean_decode_error < *a.mean_decode_error) {
      ++wins;
    }
  }
  const double frac = decode_tokens ? static_cast<double>(above) / decode_tokens : 0.0;
  return {wins * 5 >= configs * 4 && frac > 0.5,
          fmt("RAC lower decode error in %zu/%zu configs, r_t > 1 on %.3f of %zu decode tokens",
              wins, configs, frac, decode_tokens)};
}

Outcome mask_audit() {
  std::mt19937_64 rng(707);
  std::size_t runs = 0, bad = 0;
  for (int i = 0; i < 10; ++i) {
    const std::size_t cols = 8 * (1 + i % 5);
    const SymMatrix gram = gram_from(oracle::correlated_columns(rng, cols, 3 * cols), cols);
    const Matrix w = oracle::random_matrix(rng, 5, cols);
    for (const SparsityPattern& p :
         {SparsityPattern{SemiStructured{2, 4}}, SparsityPattern{Unstructured{0.3}},
          SparsityPattern{Unstructured{0.5}}, SparsityPattern{Unstructured{0.7}}}) {
      for (const auto& r : {prune_magnitude(w, p), prune_wanda(w, gram, p),
                            prune_obs(w, gram, p, {4, 0.01})}) {
        ++runs;
        const auto audit = audit_mask(r.mask, p);
        if (std::holds_alternative<SemiStructured>(p)) {
          bad += audit.groups != w.rows() * cols / 4 || audit.exact_groups != audit.groups;
        } else {
          const auto target = kept_per_row(std::get<Unstructured>(p).sparsity, cols);
          bad += audit.min_kept_per_row != target || audit.max_kept_per_row != target;
        }
        for (std::size_t row = 0; row < w.rows(); ++row) {
          for (std::size_t c = 0; c < cols; ++c) bad += !r.mask.kept(row, c) && r.weights(row, c) != 0.0;
        }
      }
    }
  }
  return {bad == 0, fmt("%zu runs, %zu infeasible", runs, bad)};
}

Outcome nested_monotonicity() {
  std::mt19937_64 rng(808);
  int violations = 0;
  for (int i = 0; i < 50; ++i) {
    const SymMatrix gram = gram_from(oracle::correlated_columns(rng, 12, 40), 12);
    const Matrix w = oracle::random_matrix(rng, 1, 12);
    double prev = 0.0;
    for (double s : {0.25, 0.5, 0.75}) {
      const auto mask = prune_magnitude(w, Unstructured{s}).mask;
      const double loss = trace_loss(w, refit_fixed_mask(w, gram, mask), gram);
      violations += loss < prev;
      prev = loss;
    }
  }
  return {violations == 0, fmt("50 rows, %d decreases", violations)};
}

int run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  return cli::run(args, out, err);
}

Outcome cli_determinism() {
  const fs::path dir = fs::temp_directory_path() / ("rac_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto p = [&](const std::string& name) { return (dir / name).string(); };
  std::string text;
  for (const auto& prompt : make_prompts(909, 4)) text += std::string(prompt.begin(), prompt.end()) + "\n";
  write_file(p("prompts.txt"), text);

  int failures = 0;
  for (const char* tag : {"a", "b"}) {
    const std::string t = tag;
    failures += run_cli({"gen-model", "--d-model", "32", "--layers", "2", "--heads", "4",
                         "--seed", "9", "--out", p("m" + t + ".tmc")}) != 0;
    failures += run_cli({"calibrate", "--model", p("m" + t + ".tmc"), "--mode", "rac",
                         "--prompts", p("prompts.txt"), "--t-max", "24", "--seed", "9", "--out",
                         p("c" + t + ".bin")}) != 0;
    failures += run_cli({"prune", "--model", p("m" + t + ".tmc"), "--calib", p("c" + t + ".bin"),
                         "--method", "obs", "--nm", "2:4", "--seed", "9", "--out",
                         p("p" + t + ".tmc"), "--report", p("r" + t + ".json")}) != 0;
  }
  int identical = 0;
  for (const char* stem : {"m%s.tmc", "c%s.bin", "p%s.tmc", "r%s.json"}) {
    identical += fnv1a_hex(read_file(p(fmt(stem, "a")))) == fnv1a_hex(read_file(p(fmt(stem, "b"))));
  }
  fs::remove_all(dir);
  return {failures == 0 && identical == 4,
          fmt("%d command failures, %d/4 artifacts hash-identical", failures, identical)};
}

Outcome off_policy_degeneracy() {
  int identical = 0;
  for (std::uint64_t i = 0; i < 3; ++i) {
    const auto model = generate_model(small_config(16, 2, 2, 128), 1100 + i);
    CalibrationConfig cfg;
    cfg.mode = CalibrationMode::rac;
    cfg.prompts = make_prompts(1200 + i, 4);
    cfg.t_max = 32;
    cfg.refs = all_refs(model.config);
    const auto on = calibrate(model, cfg);
    cfg.mode = CalibrationMode::off_policy;
    cfg.trace_model = &model;
    const auto off = calibrate(model, cfg);
    identical += off.layers == on.layers;
  }
  return {identical == 3, fmt("%d/3 statistic sets bit-identical", identical)};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"OBS sandwich", obs_sandwich},
      {"single-weight closed form", single_weight_closed_form},
      {"identity-Hessian degeneracies", identity_degeneracies},
      {"merged Gram equals concatenated columns", gram_concatenation},
      {"KV-cache decode", kv_cache},
      {"decode-phase error map", decode_error_map},
      {"mask feasibility audit", mask_audit},
      {"nested-mask monotonicity", nested_monotonicity},
      {"CLI determinism", cli_determinism},
      {"off-policy degeneracy", off_policy_degeneracy},
  };
  int failed = 0;
  int index = 0;
  for (const auto& [name, check] : criteria) {
    ++index;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s %2d %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", index, name,
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
