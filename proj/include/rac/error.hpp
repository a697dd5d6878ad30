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
#include <stdexcept>
#include <string>

namespace rac {

// Bad arguments, shapes or configurations. Maps to CLI exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Factorization or solver failure. Maps to CLI exit code 2.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::size_t index)
      : std::runtime_error(what), index_(index) {}

  // Pivot or row index at which the failure was detected.
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

// File system and serialization failures. Maps to CLI exit code 3.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rac
