// Copyright (c) 2026 ssmalign contributors
// SPDX-License-Identifier: Apache-2.0
//
// Tensor serialization: little-endian f64 payload (.bin) plus a UTF-8 JSON
// sidecar (.json) carrying {shape, name}. Checkpoints are directories holding
// one such pair per named tensor and a checkpoint.json manifest.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ssmalign/tensor.hpp"

namespace ssmalign::io {

/// Writes `stem`.bin and `stem`.json. The name is recorded in the sidecar
/// and must match `[A-Za-z0-9_.-]+`.
void save_tensor(const std::string& stem, const Tensor& t, const std::string& name);

/// Reads `stem`.bin + `stem`.json. Truncated or oversized payloads and
/// shape/size mismatches are rejected with the path reported.
Tensor load_tensor(const std::string& stem, std::string* name_out = nullptr,
                   bool requires_grad = false);

/// Writes a checkpoint directory: one tensor pair per entry plus
/// checkpoint.json listing entry order and echoing `config_json`
/// (must be a valid JSON document; "" means no config).
void save_tensor_map(const std::string& dir,
                     const std::vector<std::pair<std::string, Tensor>>& entries,
                     const std::string& config_json = "");

/// Loads every tensor named by the manifest, in manifest order.
std::vector<std::pair<std::string, Tensor>> load_tensor_map(
    const std::string& dir, std::string* config_json = nullptr, bool requires_grad = false);

/// Fixed-format float for CSV cells; identical doubles always yield
/// identical bytes.
std::string format_double(double v);

}  // namespace ssmalign::io
