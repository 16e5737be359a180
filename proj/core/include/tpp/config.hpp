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

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tpp/backbone.hpp"
#include "tpp/data.hpp"
#include "tpp/peft.hpp"
#include "tpp/pipeline.hpp"
#include "tpp/pretext.hpp"

namespace tpp {

struct ConfigKey {
  std::string_view section;
  std::string_view key;
  std::string_view default_value;  // "" means unset (a derived default applies)
  std::string_view doc;
};

/// Every accepted key with its default.
const std::vector<ConfigKey>& config_schema();

/// Flat `key = value` file with [model] [peft] [pretext] [stage] [data] [eval]
/// sections. Unknown sections or keys are errors.
class ExperimentConfig {
 public:
  ExperimentConfig();

  static ExperimentConfig parse(std::string_view text, const std::string& origin = "<config>");
  static ExperimentConfig load(const std::filesystem::path& path);

  /// "section.key" lookups; throws ConfigError for unknown keys or bad values.
  void set(std::string_view dotted, std::string value);
  const std::string& raw(std::string_view dotted) const;
  bool is_set(std::string_view dotted) const { return !raw(dotted).empty(); }
  std::string str(std::string_view dotted) const { return raw(dotted); }
  double num(std::string_view dotted) const;
  std::size_t count(std::string_view dotted) const;
  bool flag(std::string_view dotted) const;

  /// Effective configuration (all keys, defaults filled in) in the input format.
  std::string to_text() const;
  /// Converts every value once; reports the first bad one.
  void validate() const;

 private:
  std::map<std::string, std::string, std::less<>> values_;
};

ViTConfig vit_config(const ExperimentConfig& cfg);
PeftSpec peft_spec(const ExperimentConfig& cfg);
MaeConfig mae_config(const ExperimentConfig& cfg);
DinoConfig dino_config(const ExperimentConfig& cfg);
Task task_of(const ExperimentConfig& cfg);
DecoderMode decoder_mode(const ExperimentConfig& cfg);

/// Stage plans with unset values resolved to the objective's defaults.
StagePlan pretrain_plan(const ExperimentConfig& cfg);
StagePlan tpp_plan(const ExperimentConfig& cfg);
StagePlan finetune_plan(const ExperimentConfig& cfg);

/// Target-task splits: synthetic from the seed, or folders under data.root
/// (train/ plus val/ and test/ when present, otherwise split from train/).
/// data.annotation_ratio subsamples the training split.
DatasetSplits load_task_data(const ExperimentConfig& cfg, std::uint64_t seed);
/// Unlabelled data for backbone pre-training: data.pretrain_root, or a synthetic
/// upstream task drawn from a stream independent of the target task.
Dataset load_pretrain_data(const ExperimentConfig& cfg, std::uint64_t seed);

}  // namespace tpp
