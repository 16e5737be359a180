// Copyright 2026 The TPP Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tpp/backbone.hpp"

namespace tpp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  ParamGroup group = ParamGroup::Backbone;
  Shape shape;
  std::vector<double> data;
  std::uint64_t hash = 0;       // recomputed from data on load
  bool hash_verified = true;    // stored hash equals the recomputed one
};

struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  std::string provenance;
  std::string config;
  std::array<std::uint64_t, 4> rng_state{};
  std::vector<TensorRecord> records;

  const TensorRecord* find(std::string_view name) const;
  std::size_t count(ParamGroup group) const;
};

/// FNV-1a over the little-endian bytes of the values.
std::uint64_t tensor_hash(std::span<const double> values);

/// Copies the registry (optionally only some groups) into a checkpoint.
Checkpoint snapshot(const ParamRegistry& params, std::string provenance, std::string config = {},
                    std::array<std::uint64_t, 4> rng_state = {}, std::span<const ParamGroup> groups = kAllGroups);

/// Serialized bytes; identical checkpoints give identical bytes.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& context = "checkpoint");

/// Writes to a temporary sibling, then renames over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies the records of `groups` into the registry. Names, groups and shapes
/// must agree exactly in both directions; offenders are listed in a StructuralError.
void apply_checkpoint(ParamRegistry& params, const Checkpoint& ckpt, std::span<const ParamGroup> groups);

struct AuditReport {
  std::vector<std::string> changed;    // content hash differs
  std::vector<std::string> corrupted;  // stored hash disagrees with the payload
  std::size_t checked = 0;
  bool pass() const { return changed.empty() && corrupted.empty(); }
  std::string summary() const;
};

/// Compares the `groups` records of two checkpoints by name. The sets of names
/// in those groups must match, else StructuralError.
AuditReport audit_freeze(const Checkpoint& before, const Checkpoint& after, std::span<const ParamGroup> groups);

}  // namespace tpp
