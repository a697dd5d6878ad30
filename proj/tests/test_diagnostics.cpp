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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "rac/calibration.hpp"
#include "rac/compress.hpp"
#include "rac/diagnostics.hpp"
#include "rac/error.hpp"
#include "support.hpp"

using namespace rac;
using rac::testing::make_prompts;
using rac::testing::small_config;

namespace {

Tokens bytes(const std::string& s) { return Tokens(s.begin(), s.end()); }

ModelBundle pruned_copy(const ModelBundle& model, double sparsity) {
  const auto refs = all_refs(model.config);
  const auto calib = collect_prompt_phase(model, make_prompts(99, 3), refs);
  return compress_model(model, calib, SolveMode::prompt_only, Method::obs, Unstructured{sparsity},
                        refs)
      .first;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

TEST_CASE("error trace of a model against itself is zero") {
  const auto model = generate_model(small_config(), 1);
  const Tokens seq = bytes("What is 3 plus 4? 7");
  const auto e = error_trace(model, model, seq, 17);
  CHECK(e.size() == seq.size());
  for (double v : e) CHECK(v == 0.0);
}

TEST_CASE("error trace matches per-prefix naive forward passes") {
  const auto dense = generate_model(small_config(), 2);
  const auto comp = pruned_copy(dense, 0.5);
  const Tokens seq = decode(dense, bytes("Compute 12 times 9."), 20, GreedySampler{});
  const auto e = error_trace(dense, comp, seq, 19);
  for (std::size_t t = 0; t < seq.size(); ++t) {
    const Tokens prefix(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(t + 1));
    const auto a = oracle::naive_forward(dense, prefix).hidden.back();
    const auto b = oracle::naive_forward(comp, prefix).hidden.back();
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    CHECK(std::abs(e[t] - std::sqrt(s)) < 1e-6);
    CHECK(e[t] >= 0.0);
  }
}

TEST_CASE("prompt-phase errors do not depend on the continuation") {
  const auto dense = generate_model(small_config(), 3);
  const auto comp = pruned_copy(dense, 0.5);
  const Tokens prompt = bytes("Find the remainder when 91 is divided by 7.");
  const Tokens greedy = decode(dense, prompt, 16, GreedySampler{});
  const Tokens sampled = decode(dense, prompt, 16, TemperatureSampler{1.5, 8});
  REQUIRE(greedy != sampled);
  const auto a = error_trace(dense, comp, greedy, prompt.size());
  const auto b = error_trace(dense, comp, sampled, prompt.size());
  for (std::size_t t = 0; t < prompt.size(); ++t) CHECK(a[t] == b[t]);
}

TEST_CASE("error trace validation") {
  const auto dense = generate_model(small_config(), 4);
  const auto other = generate_model(small_config(32, 2, 2), 4);
  const Tokens seq = bytes("abc");
  CHECK_THROWS_AS(error_trace(dense, other, seq, 1), ValidationError);
  CHECK_THROWS_AS(error_trace(dense, dense, seq, 4), ValidationError);
}

TEST_CASE("ratio map") {
  const std::vector<std::vector<double>> a = {{1, 2, 3}, {4}};
  const auto same = ratio_map(a, a);
  for (const auto& row : same) {
    for (const auto& r : row) CHECK(*r == 1.0);
  }

  const std::vector<std::vector<double>> num = {{2, 1, 5e-13, 3}};
  const std::vector<std::vector<double>> den = {{1, 1e-13, 1, 0}};
  const auto r = ratio_map(num, den);
  CHECK(*r[0][0] == 2.0);
  CHECK(!r[0][1]);
  CHECK(*r[0][2] == 5e-13);
  CHECK(!r[0][3]);

  const auto swapped = ratio_map(den, num);
  for (std::size_t t = 0; t < 4; ++t) {
    if (r[0][t] && swapped[0][t]) CHECK(*swapped[0][t] == doctest::Approx(1.0 / *r[0][t]));
  }

  const std::vector<std::vector<double>> short_den = {{1, 1}};
  CHECK_THROWS_AS(ratio_map(num, short_den), ValidationError);
  CHECK_THROWS_AS(ratio_map(num, a), ValidationError);
}

TEST_CASE("phase summaries") {
  const std::vector<double> c(6, 0.25);
  const PhaseErrors constant[] = {{c, 2}};
  auto s = summarize_phase_errors(constant);
  CHECK(*s.mean_prompt_error == 0.25);
  CHECK(*s.mean_decode_error == 0.25);

  const PhaseErrors all_prompt[] = {{c, 6}};
  s = summarize_phase_errors(all_prompt);
  CHECK(!s.mean_decode_error);
  CHECK(s.decode_tokens == 0);

  const std::vector<double> e = {1, 2, 4};
  const PhaseErrors hand[] = {{e, 1}};
  s = summarize_phase_errors(hand);
  CHECK(*s.mean_prompt_error == 1.0);
  CHECK(*s.mean_decode_error == 3.0);

  // Pooled over problems, weighted by token count.
  const std::vector<double> f = {3, 10};
  const PhaseErrors pooled[] = {{e, 1}, {f, 1}};
  s = summarize_phase_errors(pooled);
  CHECK(*s.mean_prompt_error == 2.0);
  CHECK(*s.mean_decode_error == doctest::Approx(16.0 / 3));
  CHECK(s.prompt_tokens == 2);
  CHECK(s.decode_tokens == 3);
}

TEST_CASE("eval_nll with uniform logits is ln 256") {
  auto model = generate_model(small_config(), 5);
  for (double& v : model.output_projection.data()) v = 0.0;
  const auto r = eval_nll(model, "the quick brown fox jumps over the lazy dog", 30);
  CHECK(r.tokens == 30);
  CHECK(std::abs(r.mean_nll - std::log(256.0)) < 1e-6);
  CHECK(r.warnings.empty());
}

TEST_CASE("eval_nll matches a windowed naive oracle") {
  const auto model = generate_model(small_config(16, 2, 2, 16), 6);
  std::string text;
  for (int i = 0; i < 8; ++i) text += "Solve for x: x + 5 = 12. ";
  const std::size_t budget = 50;
  const auto r = eval_nll(model, text, budget);
  CHECK(r.tokens == budget);

  // Windows of 16 bytes overlapping by one, so 15 predictions each.
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; count < budget; start += 15) {
    const std::size_t len = std::min<std::size_t>(16, budget - count + 1);
    const Tokens win(text.begin() + static_cast<std::ptrdiff_t>(start),
                     text.begin() + static_cast<std::ptrdiff_t>(start + len));
    const auto f = oracle::naive_forward(model, win);
    for (std::size_t i = 0; i + 1 < len; ++i) {
      const auto& lg = f.logits[i];
      double mx = lg[0];
      for (double v : lg) mx = std::max(mx, v);
      double z = 0.0;
      for (double v : lg) z += std::exp(v - mx);
      total += std::log(z) + mx - lg[win[i + 1]];
      ++count;
    }
  }
  CHECK(r.mean_nll == doctest::Approx(total / static_cast<double>(count)).epsilon(1e-9));
  CHECK(eval_nll(model, text, budget).mean_nll == r.mean_nll);
}

TEST_CASE("eval_nll edge cases") {
  const auto model = generate_model(small_config(), 7);
  CHECK_THROWS_AS(eval_nll(model, "", 10), ValidationError);
  CHECK_THROWS_AS(eval_nll(model, "abc", 0), ValidationError);
  const auto r = eval_nll(model, "abcdef", 100);
  CHECK(r.tokens == 5);
  CHECK(r.warnings.size() == 1);

  const auto same = pruned_copy(model, 0.0);
  const std::string text = "Evaluate 12 squared minus 4.";
  CHECK(eval_nll(same, text, 20).mean_nll == eval_nll(model, text, 20).mean_nll);
}

TEST_CASE("diagnostics run and CSV output") {
  const auto dense = generate_model(small_config(), 8);
  const auto a = pruned_copy(dense, 0.5);
  const auto b = pruned_copy(dense, 0.25);
  const LabeledModel models[] = {{"half", &a}, {"quarter", &b}};
  const auto prompts = make_prompts(9, 3);
  const auto traces = run_diagnostics(dense, models, prompts, 12);
  REQUIRE(traces.size() == 3);

  std::size_t total_len = 0;
  for (std::size_t p = 0; p < 3; ++p) {
    const auto& tr = traces[p];
    CHECK(tr.problem == p);
    CHECK(tr.prompt_length == prompts[p].size());
    CHECK(tr.sequence == decode(dense, prompts[p], 12, GreedySampler{}));
    CHECK(tr.methods == std::vector<std::string>{"half", "quarter"});
    CHECK(tr.errors[0] == error_trace(dense, a, tr.sequence, tr.prompt_length));
    total_len += tr.sequence.size();
  }
  CHECK(run_diagnostics(dense, models, prompts, 12, 2)[2].errors == traces[2].errors);

  std::ostringstream errors;
  write_errors_csv(errors, traces);
  const auto rows = lines(errors.str());
  CHECK(rows.front() == "problem,t,phase,method,e_t");
  CHECK(rows.size() == 1 + 2 * total_len);

  // Recompute per-method phase means from the CSV text.
  double sums[2][2] = {{0, 0}, {0, 0}};
  std::size_t counts[2][2] = {{0, 0}, {0, 0}};
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = fields(rows[i]);
    REQUIRE(f.size() == 5);
    const int m = f[3] == "half" ? 0 : 1;
    const int phase = f[2] == "prompt" ? 0 : 1;
    sums[m][phase] += std::stod(f[4]);
    ++counts[m][phase];
  }
  for (int m = 0; m < 2; ++m) {
    std::vector<PhaseErrors> pe;
    for (const auto& tr : traces) pe.push_back({tr.errors[m], tr.prompt_length});
    const auto s = summarize_phase_errors(pe);
    CHECK(*s.mean_prompt_error == doctest::Approx(sums[m][0] / counts[m][0]).epsilon(1e-12));
    CHECK(*s.mean_decode_error == doctest::Approx(sums[m][1] / counts[m][1]).epsilon(1e-12));
  }

  std::ostringstream ratios;
  write_ratios_csv(ratios, traces);
  const auto rrows = lines(ratios.str());
  CHECK(rrows.front() == "problem,t,r_t");
  CHECK(rrows.size() == 1 + total_len);
  const auto f = fields(rrows[1]);
  CHECK(std::stod(f[2]) == doctest::Approx(traces[0].errors[0][0] / traces[0].errors[1][0]));

  const LabeledModel twice[] = {{"x", &a}, {"y", &a}};
  std::ostringstream ones;
  write_ratios_csv(ones, run_diagnostics(dense, twice, prompts, 4));
  const auto orows = lines(ones.str());
  for (std::size_t i = 1; i < orows.size(); ++i) {
    const auto g = fields(orows[i]);
    CHECK((g[2].empty() || g[2] == "1"));
  }

  const LabeledModel itself[] = {{"half", &a}, {"dense", &dense}};
  std::ostringstream missing;
  write_ratios_csv(missing, run_diagnostics(dense, itself, prompts, 4));
  const auto mrows = lines(missing.str());
  CHECK(mrows[1] == "0,0,");

  CHECK_THROWS_AS(run_diagnostics(dense, std::span<const LabeledModel>{}, prompts, 4),
                  ValidationError);
  const LabeledModel single[] = {{"half", &a}};
  std::ostringstream one_method;
  CHECK_THROWS_AS(write_ratios_csv(one_method, run_diagnostics(dense, single, prompts, 4)),
                  ValidationError);
}
