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

#include "tpp/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "tpp/error.hpp"

namespace fs = std::filesystem;

namespace tpp {

namespace {

constexpr std::string_view kSections[] = {"model", "peft", "pretext", "stage", "data", "eval"};

std::string trim(std::string_view s) {
  std::size_t a = 0;
  std::size_t b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

std::string dotted(std::string_view section, std::string_view key) {
  return std::string(section) + "." + std::string(key);
}

std::optional<double> opt_num(const ExperimentConfig& cfg, std::string_view key) {
  if (!cfg.is_set(key)) return std::nullopt;
  return cfg.num(key);
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = {
      {"model", "image_size", "32", "input side length in pixels"},
      {"model", "patch_size", "8", "patch side length"},
      {"model", "embed_dim", "64", "token width"},
      {"model", "depth", "4", "transformer blocks"},
      {"model", "num_heads", "4", "attention heads"},
      {"model", "mlp_ratio", "4", "MLP hidden width / embed_dim"},
      {"model", "channels", "3", "input channels"},
      {"model", "pool", "cls", "token fed to the heads: cls or mean (patch-token average)"},

      {"peft", "spec", "adapter:bottleneck=8", "mechanism and options, e.g. lora:rank=4,alpha=4"},

      {"pretext", "objective", "mae", "mae or dino"},
      {"pretext", "mask_ratio", "0.75", "fraction of patches hidden"},
      {"pretext", "decoder_dim", "0", "MAE decoder width (0: embed_dim/2)"},
      {"pretext", "decoder_depth", "1", "MAE decoder blocks"},
      {"pretext", "norm_pix_targets", "false", "per-patch normalized reconstruction targets"},
      {"pretext", "decoder_mode", "auto", "inherited MAE decoder during TPP: auto, random, freeze, update"},
      {"pretext", "teacher_momentum", "0.996", "DINO EMA momentum"},
      {"pretext", "center_momentum", "0.9", "DINO center momentum"},
      {"pretext", "teacher_temp", "0.04", "DINO teacher temperature"},
      {"pretext", "student_temp", "0.1", "DINO student temperature"},
      {"pretext", "head_hidden", "128", "DINO head hidden width"},
      {"pretext", "head_output_dim", "256", "DINO head output width K"},
      {"pretext", "global_views", "2", "DINO global crops"},
      {"pretext", "local_views", "2", "DINO local crops"},
      {"pretext", "local_size", "0", "DINO local crop side (0: image_size/2)"},

      {"stage", "pretrain_epochs", "", "backbone pre-training epochs (default 100)"},
      {"stage", "pretrain_iterations", "0", "backbone pre-training steps (overrides epochs)"},
      {"stage", "pretrain_batch_size", "64", ""},
      {"stage", "pretrain_lr", "", "default follows the objective"},
      {"stage", "pretrain_warmup_epochs", "", "default follows the objective"},
      {"stage", "pretrain_weight_decay", "", "default follows the objective"},
      {"stage", "pretrain_weight_decay_end", "", "default follows the objective"},
      {"stage", "tpp_epochs", "", "default 500 (classification) or 1000 (segmentation)"},
      {"stage", "tpp_iterations", "0", "TPP steps (overrides epochs)"},
      {"stage", "tpp_batch_size", "64", ""},
      {"stage", "tpp_lr", "", "mae: 1.5e-3; dino: 1e-4 * batch / 256"},
      {"stage", "tpp_warmup_epochs", "", "mae: 40; dino: 10"},
      {"stage", "tpp_weight_decay", "", "mae: 1.5e-2; dino: 0.04 (cosine start)"},
      {"stage", "tpp_weight_decay_end", "", "mae: constant; dino: 0.4"},
      {"stage", "finetune_iterations", "300", "fine-tuning steps"},
      {"stage", "finetune_epochs", "0", "used when finetune_iterations is 0"},
      {"stage", "finetune_batch_size", "16", ""},
      {"stage", "finetune_lr", "1e-3", ""},
      {"stage", "finetune_warmup_epochs", "0", ""},
      {"stage", "finetune_weight_decay", "0", ""},
      {"stage", "loss", "", "ce or dice_ce (default follows data.task)"},
      {"stage", "augment", "none", "fine-tuning augmentation: none or finetune_light"},
      {"stage", "beta1", "0.9", "AdamW"},
      {"stage", "beta2", "0.999", "AdamW"},
      {"stage", "eps", "1e-8", "AdamW"},

      {"data", "task", "classification", "classification or segmentation"},
      {"data", "source", "synthetic", "synthetic or folder"},
      {"data", "root", "", "folder dataset root with train/ (val/, test/ optional)"},
      {"data", "pretrain_root", "", "unlabelled folder for backbone pre-training"},
      {"data", "format", "auto", "auto, pnm or tppt"},
      {"data", "num_classes", "4", "synthetic classes (segmentation: including background)"},
      {"data", "noise", "0.1", "synthetic pixel noise"},
      {"data", "separation", "0.3", "synthetic class signal amplitude"},
      {"data", "distractor", "0.2", "synthetic distractor amplitude"},
      {"data", "max_blobs", "2", "synthetic segmentation blobs per image"},
      {"data", "train_count", "256", "synthetic training images"},
      {"data", "val_count", "128", "synthetic validation images"},
      {"data", "test_count", "128", "synthetic test images"},
      {"data", "pretrain_count", "512", "synthetic upstream images for backbone pre-training"},
      {"data", "val_fraction", "0.2", "held out from train/ when a folder dataset has no val/"},
      {"data", "annotation_ratio", "1.0", "fraction of labelled training images used"},

      {"eval", "every_epochs", "1", "validation period in epochs (0: end only)"},
      {"eval", "batch_size", "64", ""},
  };
  return schema;
}

ExperimentConfig::ExperimentConfig() {
  for (const auto& k : config_schema()) values_[dotted(k.section, k.key)] = std::string(k.default_value);
}

ExperimentConfig ExperimentConfig::parse(std::string_view text, const std::string& origin) {
  ExperimentConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  std::string section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (body.front() == '[') {
      if (body.back() != ']') throw ConfigError(where + ": malformed section header '" + body + "'");
      section = trim(std::string_view(body).substr(1, body.size() - 2));
      if (std::find(std::begin(kSections), std::end(kSections), section) == std::end(kSections)) {
        throw ConfigError(where + ": unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside of a section");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    try {
      cfg.set(section + "." + key, trim(std::string_view(body).substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(path.string() + ": cannot open config");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path.string());
}

void ExperimentConfig::set(std::string_view key, std::string value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  it->second = std::move(value);
}

const std::string& ExperimentConfig::raw(std::string_view key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  return it->second;
}

double ExperimentConfig::num(std::string_view key) const {
  const std::string& s = raw(key);
  if (s.empty()) throw ConfigError(std::string(key) + " is not set");
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (...) {
    pos = 0;
  }
  if (pos != s.size() || !std::isfinite(v)) throw ConfigError(std::string(key) + ": '" + s + "' is not a number");
  return v;
}

std::size_t ExperimentConfig::count(std::string_view key) const {
  const std::string& s = raw(key);
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError(std::string(key) + ": '" + s + "' is not a non-negative integer");
  }
  return v;
}

bool ExperimentConfig::flag(std::string_view key) const {
  const std::string& s = raw(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(std::string(key) + ": '" + s + "' is not a boolean");
}

std::string ExperimentConfig::to_text() const {
  std::string out;
  std::string_view current;
  for (const auto& k : config_schema()) {
    if (k.section != current) {
      out += (out.empty() ? "[" : "\n[") + std::string(k.section) + "]\n";
      current = k.section;
    }
    out += std::string(k.key) + " = " + raw(dotted(k.section, k.key)) + "\n";
  }
  return out;
}

void ExperimentConfig::validate() const {
  vit_config(*this).validate();
  peft_spec(*this);
  mae_config(*this);
  dino_config(*this).validate();
  task_of(*this);
  decoder_mode(*this);
  pretrain_plan(*this);
  tpp_plan(*this);
  finetune_plan(*this);
  for (const char* k : {"data.num_classes", "data.max_blobs", "data.train_count", "data.val_count", "data.test_count",
                        "data.pretrain_count", "eval.every_epochs", "eval.batch_size"}) {
    count(k);
  }
  for (const char* k : {"data.noise", "data.separation", "data.distractor", "data.val_fraction"}) num(k);
  const double ratio = num("data.annotation_ratio");
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("data.annotation_ratio must be in (0, 1]");
  const std::string& source = raw("data.source");
  if (source != "synthetic" && source != "folder") throw ConfigError("data.source must be synthetic or folder");
  const std::string& format = raw("data.format");
  if (format != "auto" && format != "pnm" && format != "tppt") throw ConfigError("data.format must be auto, pnm or tppt");
  if (count("data.num_classes") < 2) throw ConfigError("data.num_classes must be at least 2");
}

ViTConfig vit_config(const ExperimentConfig& cfg) {
  ViTConfig v;
  v.image_size = cfg.count("model.image_size");
  v.patch_size = cfg.count("model.patch_size");
  v.embed_dim = cfg.count("model.embed_dim");
  v.depth = cfg.count("model.depth");
  v.num_heads = cfg.count("model.num_heads");
  v.mlp_ratio = cfg.count("model.mlp_ratio");
  v.num_channels = cfg.count("model.channels");
  try {
    v.pooling = parse_pooling(cfg.str("model.pool"));
    v.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("[model] ") + e.what());
  }
  return v;
}

PeftSpec peft_spec(const ExperimentConfig& cfg) { return parse_peft_spec(cfg.str("peft.spec")); }

MaeConfig mae_config(const ExperimentConfig& cfg) {
  MaeConfig m;
  m.mask_ratio = cfg.num("pretext.mask_ratio");
  if (!(m.mask_ratio > 0.0 && m.mask_ratio < 1.0)) throw ConfigError("pretext.mask_ratio must be in (0, 1)");
  m.decoder_dim = cfg.count("pretext.decoder_dim");
  m.decoder_depth = cfg.count("pretext.decoder_depth");
  m.norm_pix_targets = cfg.flag("pretext.norm_pix_targets");
  return m;
}

DinoConfig dino_config(const ExperimentConfig& cfg) {
  DinoConfig d;
  d.teacher_momentum = cfg.num("pretext.teacher_momentum");
  d.center_momentum = cfg.num("pretext.center_momentum");
  d.teacher_temp = cfg.num("pretext.teacher_temp");
  d.student_temp = cfg.num("pretext.student_temp");
  d.head_hidden = cfg.count("pretext.head_hidden");
  d.head_output_dim = cfg.count("pretext.head_output_dim");
  d.num_global_views = cfg.count("pretext.global_views");
  d.num_local_views = cfg.count("pretext.local_views");
  d.local_size = cfg.count("pretext.local_size");
  return d;
}

Task task_of(const ExperimentConfig& cfg) {
  const std::string& t = cfg.raw("data.task");
  if (t == "classification") return Task::Classification;
  if (t == "segmentation") return Task::Segmentation;
  throw ConfigError("data.task must be classification or segmentation, got '" + t + "'");
}

DecoderMode decoder_mode(const ExperimentConfig& cfg) { return parse_decoder_mode(cfg.str("pretext.decoder_mode")); }

namespace {

Objective pretext_objective(const ExperimentConfig& cfg) {
  const Objective o = parse_objective(cfg.str("pretext.objective"));
  if (o != Objective::MAE && o != Objective::DINO) throw ConfigError("pretext.objective must be mae or dino");
  return o;
}

void fill_optimizer(const ExperimentConfig& cfg, StagePlan& p) {
  p.optimizer.beta1 = cfg.num("stage.beta1");
  p.optimizer.beta2 = cfg.num("stage.beta2");
  p.optimizer.eps = cfg.num("stage.eps");
  p.eval_every_epochs = cfg.count("eval.every_epochs");
  p.eval_batch_size = cfg.count("eval.batch_size");
  p.mae = mae_config(cfg);
  p.dino = dino_config(cfg);
  p.config_text = cfg.to_text();
}

// Pretext plans share the key layout "<prefix>_lr", "<prefix>_epochs", ...
StagePlan pretext_plan(const ExperimentConfig& cfg, const std::string& prefix, StagePlan p) {
  auto key = [&](const char* name) { return "stage." + prefix + "_" + name; };
  if (auto v = opt_num(cfg, key("lr"))) p.schedule.base_lr = *v;
  if (auto v = opt_num(cfg, key("warmup_epochs"))) p.schedule.warmup_epochs = *v;
  if (auto v = opt_num(cfg, key("weight_decay"))) p.schedule.wd_start = *v;
  if (auto v = opt_num(cfg, key("weight_decay_end"))) p.schedule.wd_end = *v;
  if (cfg.is_set(key("epochs"))) p.epochs = cfg.count(key("epochs"));
  p.iterations = cfg.count(key("iterations"));
  p.batch_size = cfg.count(key("batch_size"));
  if (p.batch_size == 0) throw ConfigError(key("batch_size") + " must be positive");
  fill_optimizer(cfg, p);
  return p;
}

}  // namespace

StagePlan pretrain_plan(const ExperimentConfig& cfg) {
  const Objective o = pretext_objective(cfg);
  StagePlan p = o == Objective::MAE ? default_tpp_mae_plan() : default_tpp_dino_plan();
  p.stage = Stage::BackbonePretrain;
  p.frozen_groups = {};
  p.trainable_groups = {ParamGroup::Backbone, ParamGroup::Target, ParamGroup::Head};
  p.epochs = 100;
  return pretext_plan(cfg, "pretrain", p);
}

StagePlan tpp_plan(const ExperimentConfig& cfg) {
  const Objective o = pretext_objective(cfg);
  StagePlan p = o == Objective::MAE ? default_tpp_mae_plan() : default_tpp_dino_plan();
  p.epochs = task_of(cfg) == Task::Segmentation ? 1000 : 500;
  return pretext_plan(cfg, "tpp", p);
}

StagePlan finetune_plan(const ExperimentConfig& cfg) {
  StagePlan p;
  p.stage = Stage::Finetune;
  const Task task = task_of(cfg);
  p.objective = cfg.is_set("stage.loss") ? parse_objective(cfg.str("stage.loss"))
                                         : (task == Task::Segmentation ? Objective::DiceCE : Objective::CE);
  if (p.objective == Objective::DiceCE && task == Task::Classification) {
    throw ConfigError("stage.loss dice_ce requires data.task = segmentation");
  }
  if (p.objective == Objective::CE && task == Task::Segmentation) {
    throw ConfigError("stage.loss ce is not available for segmentation (use dice_ce)");
  }
  if (p.objective != Objective::CE && p.objective != Objective::DiceCE) throw ConfigError("stage.loss must be ce or dice_ce");
  p.frozen_groups = {ParamGroup::Backbone};
  p.trainable_groups = {ParamGroup::Target, ParamGroup::Head};
  p.schedule.base_lr = cfg.num("stage.finetune_lr");
  p.schedule.warmup_epochs = cfg.num("stage.finetune_warmup_epochs");
  p.schedule.wd_start = cfg.num("stage.finetune_weight_decay");
  p.iterations = cfg.count("stage.finetune_iterations");
  p.epochs = cfg.count("stage.finetune_epochs");
  if (p.iterations == 0 && p.epochs == 0) throw ConfigError("set stage.finetune_iterations or stage.finetune_epochs");
  p.batch_size = cfg.count("stage.finetune_batch_size");
  if (p.batch_size == 0) throw ConfigError("stage.finetune_batch_size must be positive");
  p.augment = parse_policy(cfg.str("stage.augment"));
  if (p.augment != AugmentPolicy::None && p.augment != AugmentPolicy::FinetuneLight) {
    throw ConfigError("stage.augment must be none or finetune_light");
  }
  fill_optimizer(cfg, p);
  return p;
}

namespace {

SyntheticTaskSpec synthetic_spec(const ExperimentConfig& cfg) {
  SyntheticTaskSpec s;
  s.kind = task_of(cfg) == Task::Segmentation ? SyntheticTaskSpec::Kind::BlobSeg : SyntheticTaskSpec::Kind::TexturedShapesCls;
  s.num_classes = cfg.count("data.num_classes");
  s.image_size = cfg.count("model.image_size");
  s.channels = cfg.count("model.channels");
  s.noise = cfg.num("data.noise");
  s.separation = cfg.num("data.separation");
  s.distractor = cfg.num("data.distractor");
  s.max_blobs = cfg.count("data.max_blobs");
  s.train_count = cfg.count("data.train_count");
  s.val_count = cfg.count("data.val_count");
  s.test_count = cfg.count("data.test_count");
  return s;
}

LoadOptions load_options(const ExperimentConfig& cfg) {
  LoadOptions o;
  o.task = task_of(cfg);
  const std::string& f = cfg.raw("data.format");
  o.format = f == "pnm" ? ImageFormat::Pnm : f == "tppt" ? ImageFormat::Tppt : ImageFormat::Auto;
  o.image_size = cfg.count("model.image_size");
  o.channels = cfg.count("model.channels");
  if (o.task == Task::Segmentation) o.num_classes = cfg.count("data.num_classes");
  return o;
}

}  // namespace

DatasetSplits load_task_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  DatasetSplits splits;
  if (cfg.str("data.source") == "synthetic") {
    splits = generate_synthetic(synthetic_spec(cfg), SeededRng(seed).derive("data"));
  } else {
    if (!cfg.is_set("data.root")) throw ConfigError("data.root is required when data.source = folder");
    const fs::path root = cfg.str("data.root");
    if (!fs::is_directory(root / "train")) throw ConfigError(root.string() + ": missing train/ directory");
    const LoadOptions opts = load_options(cfg);
    const Dataset train = load_folder(root / "train", opts);
    if (fs::is_directory(root / "val")) {
      splits.train = train;
      splits.val = load_folder(root / "val", opts);
    } else {
      SplitSpec s;
      s.val_fraction = cfg.num("data.val_fraction");
      s.seed = SeededRng(seed).derive("split").next_u64();
      DatasetSplits parts = split_dataset(train, s);
      splits.train = std::move(parts.train);
      splits.val = std::move(parts.val);
    }
    if (fs::is_directory(root / "test")) splits.test = load_folder(root / "test", opts);
    else splits.test = splits.val.with_samples({});
  }
  const double ratio = cfg.num("data.annotation_ratio");
  if (ratio < 1.0) splits.train = subset(splits.train, ratio, SeededRng(seed).derive("annotation").next_u64());
  return splits;
}

Dataset load_pretrain_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  if (cfg.is_set("data.pretrain_root")) {
    LoadOptions opts = load_options(cfg);
    opts.task = Task::Classification;
    return load_folder(cfg.str("data.pretrain_root"), opts);
  }
  SyntheticTaskSpec s = synthetic_spec(cfg);
  s.train_count = cfg.count("data.pretrain_count");
  s.val_count = 0;
  s.test_count = 0;
  return generate_synthetic(s, SeededRng(seed).derive("upstream")).train;
}

}  // namespace tpp
