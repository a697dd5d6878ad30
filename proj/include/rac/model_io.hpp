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

#include <filesystem>
#include <string>

#include "rac/model.hpp"

namespace rac {

// TMC v1 container:
//   8 bytes   magic "TMCv1\0\0\0"
//   8 bytes   manifest length n, little-endian u64
//   n bytes   JSON manifest {format, version, config, tensors, annotations}
//   rest      little-endian float32 tensors, row-major, in manifest order
// Each tensors[] entry is {name, shape, offset, length} with offset and
// length in bytes relative to the start of the blob.
std::string serialize_tmc(const ModelBundle& model);
ModelBundle deserialize_tmc(const std::string& bytes);

void save_tmc(const ModelBundle& model, const std::filesystem::path& path);
ModelBundle load_tmc(const std::filesystem::path& path);

// Fingerprint of config and weights, ignoring annotations.
std::string content_hash(const ModelBundle& model);

// Shared file helpers; throw IoError.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace rac
