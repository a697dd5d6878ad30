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

#include "rac/diagnostics.hpp"

#include <cmath>
#include <cstdio>
#include <string>

#include "rac/error.hpp"

#include "parallel.hpp"

namespace rac {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ValidationError(msg);
}

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::vector<double> error_trace(const ModelBundle& dense, const ModelBundle& compressed,
                                std::span<const Token> sequence, std::size_t boundary) {
  require(dense.config == compressed.config,
          "error_trace: dense and compressed models have different shapes");
  require(boundary <= sequence.size(), "error_trace: boundary exceeds sequence length");
  const auto a = forward_teacher_forced(dense, sequence);
  const auto b = forward_teacher_forced(compressed, sequence);
  std::vector<double> e(sequence.size());
  for (std::size_t t = 0; t < e.size(); ++t) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.hidden[t].size(); ++i) {
      const double d = a.hidden[t][i] - b.hidden[t][i];
      s += d * d;
    }
    e[t] = std::sqrt(s);
  }
  return e;
}

std::vector<RatioRow> ratio_map(std::span<const std::vector<double>> numerator,
                                std::span<const std::vector<double>> denominator) {
  require(numerator.size() == denominator.size(),
          "ratio_map: problem counts differ (" + std::to_string(numerator.size()) + " vs " +
              std::to_string(denominator.size()) + ")");
  std::vector<RatioRow> rows(numerator.size());
  for (std::size_t p = 0; p < numerator.size(); ++p) {
    require(numerator[p].size() == denominator[p].size(),
            "ratio_map: token counts differ for problem " + std::to_string(p));
    rows[p].resize(numerator[p].size());
    for (std::size_t t = 0; t < numerator[p].size(); ++t) {
      if (denominator[p][t] >= kRatioEpsilon) {
        rows[p][t] = numerator[p][t] / denominator[p][t];
      }
    }
  }
  return rows;
}

PhaseSummary summarize_phase_errors(std::span<const PhaseErrors> traces) {
  PhaseSummary s;
  double prompt_sum = 0.0;
  double decode_sum = 0.0;
  for (const auto& tr : traces) {
    for (std::size_t t = 0; t < tr.errors.size(); ++t) {
      if (t < tr.boundary) {
        prompt_sum += tr.errors[t];
        ++s.prompt_tokens;
      } else {
        decode_sum += tr.errors[t];
        ++s.decode_tokens;
      }
    }
  }
  if (s.prompt_tokens > 0) s.mean_prompt_error = prompt_sum / static_cast<double>(s.prompt_tokens);
  if (s.decode_tokens > 0) s.mean_decode_error = decode_sum / static_cast<double>(s.decode_tokens);
  return s;
}

NllReport eval_nll(const ModelBundle& model, std::string_view stream, std::size_t budget) {
  require(!stream.empty(), "eval_nll: text stream is empty");
  require(budget > 0, "eval_nll: token budget must be positive");
  require(model.config.max_positions >= 2, "eval_nll: max_positions must be at least 2");
  NllReport report;
  double total = 0.0;
  std::size_t start = 0;
  const std::size_t window = model.config.max_positions;
  while (report.tokens < budget && start + 1 < stream.size()) {
    const std::size_t want = budget - report.tokens;
    const std::size_t len = std::min({window, want + 1, stream.size() - start});
    const auto* bytes = reinterpret_cast<const Token*>(stream.data() + start);
    DecodeSession session(model);
    for (std::size_t i = 0; i + 1 < len; ++i) {
      const auto& logits = session.feed(bytes[i]).logits;
      double mx = logits[0];
      for (double v : logits) mx = std::max(mx, v);
      double z = 0.0;
      for (double v : logits) z += std::exp(v - mx);
      total += -(logits[bytes[i + 1]] - mx - std::log(z));
      ++report.tokens;
    }
    start += len - 1;
  }
  if (report.tokens < budget) {
    report.warnings.push_back("stream provides only " + std::to_string(report.tokens) +
                              " predicted tokens, fewer than the budget " +
                              std::to_string(budget));
  }
  report.mean_nll = report.tokens > 0 ? total / static_cast<double>(report.tokens) : 0.0;
  return report;
}

std::vector<DiagnosticTrace> run_diagnostics(const ModelBundle& dense,
                                             std::span<const LabeledModel> compressed,
                                             std::span<const Tokens> prompts,
                                             std::size_t max_new, std::size_t threads) {
  require(!compressed.empty(), "diagnostics: at least one compressed model is required");
  require(!prompts.empty(), "diagnostics: no held-out prompts");
  std::vector<DiagnosticTrace> traces(prompts.size());
  detail::parallel_for(prompts.size(), threads, [&](std::size_t p) {
    DiagnosticTrace tr;
    tr.problem = p;
    tr.prompt_length = prompts[p].size();
    tr.sequence = decode(dense, prompts[p], max_new, GreedySampler{});
    for (const auto& m : compressed) {
      tr.methods.push_back(m.label);
      tr.errors.push_back(error_trace(dense, *m.model, tr.sequence, tr.prompt_length));
    }
    traces[p] = std::move(tr);
  });
  return traces;
}

void write_errors_csv(std::ostream& out, std::span<const DiagnosticTrace> traces) {
  out << "problem,t,phase,method,e_t\n";
  for (const auto& tr : traces) {
    for (std::size_t m = 0; m < tr.methods.size(); ++m) {
      for (std::size_t t = 0; t < tr.errors[m].size(); ++t) {
        out << tr.problem << ',' << t << ',' << (t < tr.prompt_length ? "prompt" : "decode")
            << ',' << tr.methods[m] << ',' << number(tr.errors[m][t]) << '\n';
      }
    }
  }
}

void write_ratios_csv(std::ostream& out, std::span<const DiagnosticTrace> traces) {
  out << "problem,t,r_t\n";
  for (const auto& tr : traces) {
    require(tr.errors.size() >= 2, "ratios: need two methods per problem");
    const auto rows = ratio_map(std::span(tr.errors).subspan(0, 1),
                                std::span(tr.errors).subspan(1, 1));
    for (std::size_t t = 0; t < rows[0].size(); ++t) {
      out << tr.problem << ',' << t << ',';
      if (rows[0][t]) out << number(*rows[0][t]);
      out << '\n';
    }
  }
}

}  // namespace rac
