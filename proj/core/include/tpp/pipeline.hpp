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
#include <functional>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tpp/backbone.hpp"
#include "tpp/checkpoint.hpp"
#include "tpp/data.hpp"
#include "tpp/metrics.hpp"
#include "tpp/peft.hpp"
#include "tpp/pretext.hpp"

namespace tpp {

// ---- schedules and optimizer ----

struct ScheduleSpec {
  double base_lr = 1e-3;
  double warmup_epochs = 0.0;
  std::size_t steps_per_epoch = 1;
  double wd_start = 0.0;
  std::optional<double> wd_end;  // cosine from wd_start to wd_end when set
  bool lr_scaling = false;       // base_lr * batch / 256
};

/// Linear warm-up over warmup_epochs * steps_per_epoch steps, then
/// 0.5 * base * (1 + cos(pi * progress)) down to zero at total_steps.
double lr_at(const ScheduleSpec& schedule, std::size_t step, std::size_t total_steps);
/// Constant wd_start, or the cosine from wd_start (step 0) to wd_end (total_steps).
double wd_at(const ScheduleSpec& schedule, std::size_t step, std::size_t total_steps);
/// base_lr, or base_lr * batch / 256 under the linear scaling rule.
double effective_base_lr(const ScheduleSpec& schedule, std::size_t batch_size);

struct AdamWSpec {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamWState {
  std::size_t step = 0;
  std::map<std::string, std::vector<double>, std::less<>> m;
  std::map<std::string, std::vector<double>, std::less<>> v;
};

/// One AdamW update of a single tensor at 1-based step t:
/// p *= 1 - lr*wd, then p -= lr * mhat / (sqrt(vhat) + eps).
void adamw_update(std::span<double> param, std::span<const double> grad, std::vector<double>& m,
                  std::vector<double>& v, std::size_t t, double lr, double wd, const AdamWSpec& spec);
/// Steps every trainable parameter that holds a gradient.
void adamw_step(ParamRegistry& params, AdamWState& state, double lr, double wd, const AdamWSpec& spec);

// ---- stage plans ----

enum class Stage { BackbonePretrain, TPP, Finetune };
enum class Objective { MAE, DINO, CE, DiceCE };
/// Handling of an MAE decoder inherited from backbone pre-training during TPP.
enum class DecoderMode { Auto, Random, Freeze, Update };
enum class InitMode { Random, FromCheckpoint, Transfer, Upstream };

std::string_view stage_name(Stage stage);
std::string_view objective_name(Objective objective);
std::string_view decoder_mode_name(DecoderMode mode);
std::string_view init_mode_name(InitMode mode);
Objective parse_objective(std::string_view text);
DecoderMode parse_decoder_mode(std::string_view text);

struct InitSpec {
  InitMode mode = InitMode::Random;
  std::filesystem::path path;
};

struct StagePlan {
  Stage stage = Stage::Finetune;
  Objective objective = Objective::CE;
  std::set<ParamGroup> frozen_groups{ParamGroup::Backbone};
  std::set<ParamGroup> trainable_groups{ParamGroup::Target, ParamGroup::Head};
  ScheduleSpec schedule;
  AdamWSpec optimizer;
  std::size_t epochs = 0;
  std::size_t iterations = 0;  // takes precedence when non-zero
  std::size_t batch_size = 16;
  InitSpec init;
  MaeConfig mae;
  DinoConfig dino;
  AugmentPolicy augment = AugmentPolicy::None;
  /// Validation every this many epochs (0: only at the end).
  std::size_t eval_every_epochs = 1;
  std::size_t eval_batch_size = 64;
  std::string config_text;

  /// Group sets disjoint and covering `params`, plus the per-stage rules.
  void validate(const ParamRegistry& params) const;
  std::size_t steps_per_epoch(std::size_t dataset_size) const;
  std::size_t total_steps(std::size_t dataset_size) const;
};

/// TPP plan with the MAE defaults: lr 1.5e-3, wd 1.5e-2, batch 64, 500 epochs, 40 warm-up.
StagePlan default_tpp_mae_plan();
/// TPP plan with the DINO defaults: lr 1e-4 * batch / 256, 10 warm-up epochs, wd cosine 0.04 -> 0.4.
StagePlan default_tpp_dino_plan();

// ---- logs ----

/// JSON-lines metric log. Lines are kept in memory and optionally mirrored to a file.
class MetricLog {
 public:
  MetricLog() = default;
  explicit MetricLog(const std::filesystem::path& path);

  void log_step(Stage stage, std::size_t step, std::size_t epoch, double lr, double wd, double loss);
  void log_eval(Stage stage, std::size_t epoch, const EvalReport& report);
  void log_info(std::string_view key, std::string_view value);
  void append_line(std::string line);

  const std::vector<std::string>& lines() const { return lines_; }
  std::vector<double> losses() const;

 private:
  std::vector<std::string> lines_;
  std::shared_ptr<std::ofstream> file_;
};

// ---- stages ----

struct StageResult {
  Checkpoint before;
  Checkpoint after;
  AuditReport audit;
  std::vector<double> losses;
  std::optional<EvalReport> last_eval;
  std::size_t steps = 0;
};

/// Runs one stage on `train` (and evaluates on `val` for supervised objectives).
/// Frozen groups are audited before returning; a violation throws StateError and a
/// non-finite loss throws NumericError with the recent history.
StageResult run_stage(const StagePlan& plan, VisionTransformer& model, const Dataset& train, const Dataset* val,
                      const SeededRng& rng, MetricLog& log);

/// Random: mechanism defaults. Other modes load the Target group from init.path,
/// leaving Backbone and Head untouched.
void init_target_params(VisionTransformer& model, const PeftSpec& spec, const InitSpec& init, const SeededRng& rng);

/// Loads the Backbone group of `ckpt`. With `inherit_decoder`, an MAE decoder stored
/// alongside the backbone is recreated (dimensions read from the file) and loaded;
/// its configuration is returned.
std::optional<MaeConfig> load_backbone(VisionTransformer& model, const Checkpoint& ckpt, bool inherit_decoder,
                                       const MaeConfig& base = {});

/// Sets up the MAE decoder for a TPP plan and returns the resolved mode. Auto picks
/// Freeze for classification and Update for segmentation when a decoder was inherited,
/// Random otherwise. Freeze moves the Head group (which holds the decoder) to the
/// frozen set.
DecoderMode prepare_tpp_decoder(VisionTransformer& model, StagePlan& plan, DecoderMode mode, Task task,
                                const SeededRng& rng);

/// Evaluation with the model's head on a labelled dataset.
EvalReport evaluate(const VisionTransformer& model, const Dataset& data, std::size_t batch_size);

struct GridRow {
  double lr = 0.0;
  double score = 0.0;
  bool diverged = false;
  std::string error;
};

struct GridResult {
  double best_lr = 0.0;
  std::vector<GridRow> ranked;  // best first; diverged runs last
};

/// One fine-tuning run per learning rate on a fresh model from `build`; ranked by
/// the validation primary metric.
GridResult grid_search(const StagePlan& base_plan, const std::vector<double>& lr_grid,
                       const std::function<VisionTransformer()>& build, const Dataset& train, const Dataset& val,
                       const SeededRng& rng, MetricLog& log);

/// Worker count from TPP_NUM_WORKERS (default 1).
std::size_t num_workers();

}  // namespace tpp
