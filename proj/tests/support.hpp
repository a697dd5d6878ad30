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

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rac/model.hpp"

namespace rac::testing {

// Seeded arithmetic word problems, one per prompt.
inline std::vector<Tokens> make_prompts(std::uint64_t seed, std::size_t count) {
  static const char* const kTemplates[] = {
      "What is %d plus %d?",
      "Compute %d times %d.",
      "Find the remainder when %d is divided by %d.",
      "Solve for x: x + %d = %d.",
      "What is the greatest common divisor of %d and %d?",
      "How many integers lie strictly between %d and %d?",
      "Evaluate %d squared minus %d.",
      "If a train travels %d miles in %d hours, what is its speed?",
  };
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, 7);
  std::uniform_int_distribution<int> num(2, 999);
  std::vector<Tokens> prompts;
  for (std::size_t i = 0; i < count; ++i) {
    char buf[160];
    const int a = num(rng);
    const int b = num(rng);
    std::snprintf(buf, sizeof(buf), kTemplates[pick(rng)], a, b);
    std::string s(buf);
    prompts.emplace_back(s.begin(), s.end());
  }
  return prompts;
}

inline ModelConfig small_config(std::size_t d_model = 16, std::size_t layers = 2,
                                std::size_t heads = 2, std::size_t max_positions = 128) {
  ModelConfig c;
  c.d_model = d_model;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_mlp = 4 * d_model;
  c.max_positions = max_positions;
  return c;
}

}  // namespace rac::testing
