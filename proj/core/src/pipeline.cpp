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

#include "tpp/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "tpp/error.hpp"
#include "tpp/ops.hpp"

namespace tpp {

namespace {

using json = nlohmann::json;

std::vector<std::size_t> permutation(std::size_t n, SeededRng rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

// Runs fn(i) for i in [0, n) on up to num_workers() threads. Every i writes only
// its own slot, so the result does not depend on the thread count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(num_workers(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

bool supervised(Objective o) { return o == Objective::CE || o == Objective::DiceCE; }

std::string groups_text(const std::set<ParamGroup>& groups) {
  std::string s = "{";
  for (auto g : groups) s += (s.size() > 1 ? "," : "") + std::string(group_name(g));
  return s + "}";
}

// [B,K,H,W] logits and [H,W] label maps -> CE over pixels plus foreground Dice.
Tensor dice_ce_loss(const Tensor& logits, const std::vector<const Tensor*>& masks) {
  const std::size_t b = logits.dim(0);
  const std::size_t k = logits.dim(1);
  const std::size_t hw = logits.dim(2) * logits.dim(3);
  const Tensor flat = reshape(permute(logits, {0, 2, 3, 1}), {b * hw, k});
  std::vector<std::size_t> labels(b * hw);
  std::vector<double> onehot(b * hw * (k - 1), 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t p = 0; p < hw; ++p) {
      const auto c = static_cast<std::size_t>((*masks[i])[p]);
      labels[i * hw + p] = c;
      if (c > 0) onehot[(i * hw + p) * (k - 1) + (c - 1)] = 1.0;
    }
  const Tensor ce = cross_entropy(flat, labels);
  const Tensor fg = slice(softmax(flat), 1, 1, k - 1);
  const Tensor dl = dice_loss(fg, Tensor({b * hw, k - 1}, std::move(onehot)));
  return add(ce, dl);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

// ---- schedules and optimizer ----

double lr_at(const ScheduleSpec& s, std::size_t step, std::size_t total_steps) {
  if (step > total_steps) {
    throw ArgumentError("lr_at: step " + std::to_string(step) + " beyond total " + std::to_string(total_steps));
  }
  const double warmup = s.warmup_epochs * static_cast<double>(s.steps_per_epoch);
  const auto t = static_cast<double>(step);
  const auto total = static_cast<double>(total_steps);
  if (warmup > 0.0 && t < warmup) return s.base_lr * t / warmup;
  if (total <= warmup) return s.base_lr;
  const double progress = (t - warmup) / (total - warmup);
  return 0.5 * s.base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

double wd_at(const ScheduleSpec& s, std::size_t step, std::size_t total_steps) {
  if (step > total_steps) {
    throw ArgumentError("wd_at: step " + std::to_string(step) + " beyond total " + std::to_string(total_steps));
  }
  if (!s.wd_end || total_steps == 0) return s.wd_start;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  // lerp is exact at both endpoints.
  return std::lerp(*s.wd_end, s.wd_start, 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

double effective_base_lr(const ScheduleSpec& s, std::size_t batch_size) {
  return s.lr_scaling ? s.base_lr * static_cast<double>(batch_size) / 256.0 : s.base_lr;
}

void adamw_update(std::span<double> p, std::span<const double> g, std::vector<double>& m, std::vector<double>& v,
                  std::size_t t, double lr, double wd, const AdamWSpec& spec) {
  if (m.size() != p.size()) m.assign(p.size(), 0.0);
  if (v.size() != p.size()) v.assign(p.size(), 0.0);
  const double bc1 = 1.0 - std::pow(spec.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(spec.beta2, static_cast<double>(t));
  const double decay = 1.0 - lr * wd;
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = spec.beta1 * m[i] + (1.0 - spec.beta1) * g[i];
    v[i] = spec.beta2 * v[i] + (1.0 - spec.beta2) * g[i] * g[i];
    p[i] *= decay;
    p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + spec.eps);
  }
}

void adamw_step(ParamRegistry& params, AdamWState& state, double lr, double wd, const AdamWSpec& spec) {
  ++state.step;
  for (const Param& p : params.params()) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    Tensor handle = p.tensor;
    adamw_update(handle.mutable_data(), p.tensor.grad(), state.m[p.name], state.v[p.name], state.step, lr, wd, spec);
  }
}

// ---- plans ----

std::string_view stage_name(Stage stage) {
  switch (stage) {
    case Stage::BackbonePretrain: return "pretrain";
    case Stage::TPP: return "tpp";
    case Stage::Finetune: return "finetune";
  }
  return "?";
}

std::string_view objective_name(Objective o) {
  switch (o) {
    case Objective::MAE: return "mae";
    case Objective::DINO: return "dino";
    case Objective::CE: return "ce";
    case Objective::DiceCE: return "dice_ce";
  }
  return "?";
}

std::string_view decoder_mode_name(DecoderMode mode) {
  switch (mode) {
    case DecoderMode::Auto: return "auto";
    case DecoderMode::Random: return "random";
    case DecoderMode::Freeze: return "freeze";
    case DecoderMode::Update: return "update";
  }
  return "?";
}

std::string_view init_mode_name(InitMode mode) {
  switch (mode) {
    case InitMode::Random: return "random";
    case InitMode::FromCheckpoint: return "checkpoint";
    case InitMode::Transfer: return "transfer";
    case InitMode::Upstream: return "upstream";
  }
  return "?";
}

Objective parse_objective(std::string_view text) {
  for (auto o : {Objective::MAE, Objective::DINO, Objective::CE, Objective::DiceCE}) {
    if (objective_name(o) == text) return o;
  }
  throw ConfigError("unknown objective '" + std::string(text) + "' (expected mae, dino, ce or dice_ce)");
}

DecoderMode parse_decoder_mode(std::string_view text) {
  for (auto m : {DecoderMode::Auto, DecoderMode::Random, DecoderMode::Freeze, DecoderMode::Update}) {
    if (decoder_mode_name(m) == text) return m;
  }
  throw ConfigError("unknown decoder mode '" + std::string(text) + "' (expected auto, random, freeze or update)");
}

void StagePlan::validate(const ParamRegistry& params) const {
  for (auto g : frozen_groups) {
    if (trainable_groups.count(g)) throw StateError("group " + std::string(group_name(g)) + " is both frozen and trainable");
  }
  for (auto g : kAllGroups) {
    if (params.has_group(g) && !frozen_groups.count(g) && !trainable_groups.count(g)) {
      throw StateError("group " + std::string(group_name(g)) + " is present but neither frozen nor trainable");
    }
  }
  if (stage != Stage::BackbonePretrain && !frozen_groups.count(ParamGroup::Backbone)) {
    throw StateError(std::string(stage_name(stage)) + " stage must freeze the Backbone group");
  }
  if (stage == Stage::TPP && !trainable_groups.count(ParamGroup::Target)) {
    throw StateError("tpp stage must train the Target group");
  }
  if (stage == Stage::Finetune && !(trainable_groups.count(ParamGroup::Target) && trainable_groups.count(ParamGroup::Head))) {
    throw StateError("finetune stage must train the Target and Head groups");
  }
  if (stage == Stage::Finetune && !supervised(objective)) throw StateError("finetune stage needs a supervised objective");
  if (stage != Stage::Finetune && supervised(objective)) throw StateError("pretext stages need the mae or dino objective");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (epochs == 0 && iterations == 0) throw ConfigError("stage budget is zero (set epochs or iterations)");
}

std::size_t StagePlan::steps_per_epoch(std::size_t n) const {
  const std::size_t b = std::min(batch_size, n);
  return b == 0 ? 0 : (n + b - 1) / b;
}

std::size_t StagePlan::total_steps(std::size_t n) const { return iterations ? iterations : epochs * steps_per_epoch(n); }

StagePlan default_tpp_mae_plan() {
  StagePlan p;
  p.stage = Stage::TPP;
  p.objective = Objective::MAE;
  p.frozen_groups = {ParamGroup::Backbone};
  p.trainable_groups = {ParamGroup::Target, ParamGroup::Head};
  p.schedule.base_lr = 1.5e-3;
  p.schedule.warmup_epochs = 40;
  p.schedule.wd_start = 1.5e-2;
  p.batch_size = 64;
  p.epochs = 500;
  return p;
}

StagePlan default_tpp_dino_plan() {
  StagePlan p;
  p.stage = Stage::TPP;
  p.objective = Objective::DINO;
  p.frozen_groups = {ParamGroup::Backbone};
  p.trainable_groups = {ParamGroup::Target, ParamGroup::Head};
  p.schedule.base_lr = 1e-4;
  p.schedule.lr_scaling = true;
  p.schedule.warmup_epochs = 10;
  p.schedule.wd_start = 0.04;
  p.schedule.wd_end = 0.4;
  p.batch_size = 64;
  p.epochs = 500;
  return p;
}

// ---- logs ----

MetricLog::MetricLog(const std::filesystem::path& path) : file_(std::make_shared<std::ofstream>(path)) {
  if (!*file_) throw IoError(path.string() + ": cannot open log for writing");
}

void MetricLog::append_line(std::string line) {
  if (file_) *file_ << line << '\n' << std::flush;
  lines_.push_back(std::move(line));
}

void MetricLog::log_step(Stage stage, std::size_t step, std::size_t epoch, double lr, double wd, double loss) {
  json j = {{"stage", stage_name(stage)}, {"step", step}, {"epoch", epoch}, {"lr", lr}, {"wd", wd}, {"loss", loss}};
  append_line(j.dump());
}

void MetricLog::log_eval(Stage stage, std::size_t epoch, const EvalReport& report) {
  for (const auto& [name, value] : report.metrics) {
    json j = {{"stage", stage_name(stage)}, {"epoch", epoch},  {"split", report.split},
              {"metric", name},             {"value", value}, {"samples", report.sample_count}};
    append_line(j.dump());
  }
  for (const auto& note : report.notes) log_info("note", note);
}

void MetricLog::log_info(std::string_view key, std::string_view value) {
  json j = {{"info", key}, {"value", value}};
  append_line(j.dump());
}

std::vector<double> MetricLog::losses() const {
  std::vector<double> out;
  for (const auto& line : lines_) {
    const json j = json::parse(line);
    if (j.contains("loss")) out.push_back(j["loss"].get<double>());
  }
  return out;
}

// ---- stages ----

std::size_t num_workers() {
  const char* env = std::getenv("TPP_NUM_WORKERS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("TPP_NUM_WORKERS must be a positive integer, got '" + std::string(env) + "'");
  return static_cast<std::size_t>(v);
}

EvalReport evaluate(const VisionTransformer& model, const Dataset& data, std::size_t batch_size) {
  if (data.empty()) throw DatasetError("evaluate: empty dataset");
  if (!model.head()) throw StateError("evaluate: model has no head");
  NoGradGuard guard;
  const std::size_t n = data.size();
  const std::size_t b = std::max<std::size_t>(batch_size, 1);
  const std::size_t k = model.head()->num_classes;
  if (model.head()->kind == HeadSpec::Kind::Classification) {
    std::vector<double> probs;
    std::vector<std::size_t> labels;
    for (std::size_t s = 0; s < n; s += b) {
      std::vector<Tensor> imgs;
      for (std::size_t i = s; i < std::min(n, s + b); ++i) {
        imgs.push_back(data.samples[i].image);
        labels.push_back(data.samples[i].label);
      }
      const Tensor p = softmax(model.classify(stack_images(imgs)));
      probs.insert(probs.end(), p.values().begin(), p.values().end());
    }
    EvalReport r = classification_report(Tensor({n, k}, std::move(probs)), labels, k);
    Tape::current().clear();
    return r;
  }
  std::vector<Tensor> preds;
  std::vector<Tensor> gts;
  for (std::size_t s = 0; s < n; s += b) {
    std::vector<Tensor> imgs;
    for (std::size_t i = s; i < std::min(n, s + b); ++i) {
      imgs.push_back(data.samples[i].image);
      if (!data.samples[i].mask) throw DatasetError("evaluate: sample " + data.samples[i].id + " has no mask");
      gts.push_back(*data.samples[i].mask);
    }
    const Tensor logits = model.segment(stack_images(imgs));
    const std::size_t h = logits.dim(2);
    const std::size_t w = logits.dim(3);
    for (std::size_t i = 0; i < logits.dim(0); ++i) {
      Tensor map({h, w});
      auto md = map.mutable_data();
      for (std::size_t p = 0; p < h * w; ++p) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c) {
          if (logits[((i * k) + c) * h * w + p] > logits[((i * k) + best) * h * w + p]) best = c;
        }
        md[p] = static_cast<double>(best);
      }
      preds.push_back(map);
    }
  }
  EvalReport r = segmentation_report(preds, gts, k);
  Tape::current().clear();
  return r;
}

StageResult run_stage(const StagePlan& plan, VisionTransformer& model, const Dataset& train, const Dataset* val,
                      const SeededRng& rng, MetricLog& log) {
  if (train.empty()) throw DatasetError("run_stage: empty training set");
  ParamRegistry& reg = model.registry();
  if (plan.objective == Objective::MAE && !has_mae_decoder(reg)) add_mae_decoder(model, plan.mae, rng.derive("mae_decoder"));
  if (plan.objective == Objective::DINO) {
    plan.dino.validate();
    if (!reg.contains(std::string(kDinoHeadPrefix) + "fc1.weight")) {
      // Stage-local scaffolding: it trains with the stage's trainable parameters and is dropped afterwards.
      const ParamGroup g = plan.stage == Stage::BackbonePretrain ? ParamGroup::Backbone : ParamGroup::Target;
      add_dino_head(model, plan.dino, g, rng.derive("dino_head"));
    }
  }
  if (supervised(plan.objective)) {
    if (!model.head()) throw StateError("run_stage: supervised stage needs a head");
    const bool seg = model.head()->kind == HeadSpec::Kind::Segmentation;
    if (seg != (plan.objective == Objective::DiceCE)) {
      throw ConfigError(std::string("objective ") + std::string(objective_name(plan.objective)) + " does not match a " +
                        (seg ? "segmentation" : "classification") + " head");
    }
  }
  plan.validate(reg);
  for (auto g : plan.frozen_groups) reg.set_group_trainable(g, false);
  for (auto g : plan.trainable_groups) reg.set_group_trainable(g, true);
  if (reg.trainable_count() == 0) throw StateError("run_stage: no trainable parameters");

  StageResult result;
  result.before = snapshot(reg, std::string(stage_name(plan.stage)) + ":before", plan.config_text, rng.state());

  const std::size_t n = train.size();
  const std::size_t batch = std::min(plan.batch_size, n);
  const std::size_t spe = plan.steps_per_epoch(n);
  const std::size_t total = plan.total_steps(n);
  ScheduleSpec schedule = plan.schedule;
  schedule.steps_per_epoch = spe;
  schedule.base_lr = effective_base_lr(plan.schedule, batch);
  schedule.lr_scaling = false;
  log.log_info("stage", stage_name(plan.stage));
  log.log_info("objective", objective_name(plan.objective));
  log.log_info("frozen_groups", groups_text(plan.frozen_groups));
  log.log_info("trainable_groups", groups_text(plan.trainable_groups));
  log.log_info("effective_base_lr", fmt_double(schedule.base_lr));
  log.log_info("trainable_ratio", fmt_double(reg.trainable_ratio()));

  std::optional<VisionTransformer> teacher;
  std::vector<double> center;
  if (plan.objective == Objective::DINO) {
    teacher.emplace(model.detached_copy());
    center.assign(plan.dino.head_output_dim, 0.0);
  }

  AdamWState opt;
  std::vector<std::size_t> order;
  std::size_t last_eval_step = static_cast<std::size_t>(-1);
  auto run_eval = [&](std::size_t epoch, std::size_t step) {
    EvalReport r = evaluate(model, *val, plan.eval_batch_size);
    r.split = "val";
    log.log_eval(plan.stage, epoch, r);
    result.last_eval = r;
    last_eval_step = step;
  };

  for (std::size_t step = 0; step < total; ++step) {
    const std::size_t epoch = step / spe;
    const std::size_t pos = step % spe;
    if (pos == 0) order = permutation(n, rng.derive("epoch", epoch));
    const std::size_t begin = pos * batch;
    const std::size_t end = std::min(begin + batch, n);
    const std::size_t count = end - begin;
    const double lr = lr_at(schedule, step, total);
    const double wd = wd_at(schedule, step, total);

    reg.drop_grads();
    Tensor loss;
    std::vector<Tensor> teacher_outputs;
    if (plan.objective == Objective::DINO) {
      std::vector<Tensor> imgs(count);
      std::vector<SeededRng> rngs;
      for (std::size_t i = 0; i < count; ++i) {
        imgs[i] = train.samples[order[begin + i]].image;
        rngs.push_back(rng.derive("views", epoch, order[begin + i]));
      }
      const ViewBatch views = make_views(rngs, imgs, plan.dino);
      DinoStepResult r = dino_step(model, *teacher, views, center, plan.dino);
      loss = r.loss;
      teacher_outputs = std::move(r.teacher_outputs);
    } else {
      std::vector<Tensor> imgs(count);
      parallel_for(count, [&](std::size_t i) {
        const std::size_t idx = order[begin + i];
        SeededRng local = rng.derive("augment", epoch, idx);
        imgs[i] = augment(local, train.samples[idx].image, plan.augment);
      });
      const Tensor images = stack_images(imgs);
      if (plan.objective == Objective::MAE) {
        SeededRng mask_rng = rng.derive("mask", step);
        loss = mae_step(model, images, plan.mae, mask_rng);
      } else if (plan.objective == Objective::CE) {
        std::vector<std::size_t> labels(count);
        for (std::size_t i = 0; i < count; ++i) labels[i] = train.samples[order[begin + i]].label;
        loss = cross_entropy(model.classify(images), labels);
      } else {
        std::vector<const Tensor*> masks(count);
        for (std::size_t i = 0; i < count; ++i) {
          const auto& m = train.samples[order[begin + i]].mask;
          if (!m) throw DatasetError("run_stage: segmentation sample without mask");
          masks[i] = &*m;
        }
        loss = dice_ce_loss(model.segment(images), masks);
      }
    }

    const double value = loss.item();
    if (!std::isfinite(value)) {
      Tape::current().clear();
      std::string history;
      const std::size_t from = result.losses.size() > 10 ? result.losses.size() - 10 : 0;
      for (std::size_t i = from; i < result.losses.size(); ++i) history += (history.empty() ? "" : ", ") + fmt_double(result.losses[i]);
      throw NumericError("non-finite loss at " + std::string(stage_name(plan.stage)) + " step " + std::to_string(step) +
                         " (epoch " + std::to_string(epoch) + ", lr " + fmt_double(lr) + "); recent losses: [" + history + "]");
    }
    backward(loss);
    adamw_step(reg, opt, lr, wd, plan.optimizer);
    Tape::current().clear();
    if (teacher) {
      dino_teacher_update(teacher->registry(), reg, plan.dino.teacher_momentum);
      center = dino_center_update(center, teacher_outputs, plan.dino.center_momentum);
    }
    result.losses.push_back(value);
    log.log_step(plan.stage, step, epoch, lr, wd, value);

    const bool epoch_end = pos + 1 == spe;
    if (val && supervised(plan.objective) && epoch_end && plan.eval_every_epochs &&
        (epoch + 1) % plan.eval_every_epochs == 0) {
      run_eval(epoch, step);
    }
  }
  if (val && supervised(plan.objective) && total > 0 && last_eval_step != total - 1) run_eval((total - 1) / spe, total - 1);
  reg.drop_grads();

  if (plan.objective == Objective::DINO) reg.remove_prefix(kDinoHeadPrefix);
  result.steps = total;
  result.after = snapshot(reg, std::string(stage_name(plan.stage)), plan.config_text, rng.state());
  const std::vector<ParamGroup> frozen(plan.frozen_groups.begin(), plan.frozen_groups.end());
  result.audit = audit_freeze(result.before, result.after, frozen);
  if (!result.audit.pass()) throw StateError("freeze violation: " + result.audit.summary());
  return result;
}

void init_target_params(VisionTransformer& model, const PeftSpec& spec, const InitSpec& init, const SeededRng& rng) {
  if (!model.registry().has_group(ParamGroup::Target)) throw StateError("init_target_params: no PEFT mechanism attached");
  if (init.mode == InitMode::Random) {
    reset_target_params(model, spec, rng);
    return;
  }
  const Checkpoint ckpt = load_checkpoint(init.path);
  const ParamGroup target[] = {ParamGroup::Target};
  apply_checkpoint(model.registry(), ckpt, target);
}

std::optional<MaeConfig> load_backbone(VisionTransformer& model, const Checkpoint& ckpt, bool inherit_decoder,
                                       const MaeConfig& base) {
  const ParamGroup backbone[] = {ParamGroup::Backbone};
  apply_checkpoint(model.registry(), ckpt, backbone);
  const std::string prefix(kMaeDecoderPrefix);
  const TensorRecord* token = ckpt.find(prefix + "mask_token");
  if (!inherit_decoder || !token) return std::nullopt;
  MaeConfig cfg = base;
  cfg.decoder_dim = token->shape.back();
  cfg.decoder_depth = 0;
  while (ckpt.find(prefix + "blocks." + std::to_string(cfg.decoder_depth) + ".norm1.weight")) ++cfg.decoder_depth;
  add_mae_decoder(model, cfg, SeededRng(0));
  Checkpoint decoder;
  for (const auto& r : ckpt.records) {
    if (r.name.rfind(prefix, 0) == 0) decoder.records.push_back(r);
  }
  const ParamGroup head[] = {ParamGroup::Head};
  apply_checkpoint(model.registry(), decoder, head);
  return cfg;
}

DecoderMode prepare_tpp_decoder(VisionTransformer& model, StagePlan& plan, DecoderMode mode, Task task,
                                const SeededRng& rng) {
  if (plan.objective != Objective::MAE) return mode;
  const bool inherited = has_mae_decoder(model.registry());
  DecoderMode resolved = mode;
  if (resolved == DecoderMode::Auto) {
    resolved = !inherited ? DecoderMode::Random : task == Task::Classification ? DecoderMode::Freeze : DecoderMode::Update;
  }
  if (!inherited && resolved != DecoderMode::Random) {
    throw ConfigError("decoder mode " + std::string(decoder_mode_name(resolved)) +
                      " needs a backbone checkpoint that carries an MAE decoder");
  }
  if (resolved == DecoderMode::Random) {
    model.registry().remove_prefix(kMaeDecoderPrefix);
    add_mae_decoder(model, plan.mae, rng.derive("mae_decoder"));
  }
  if (resolved == DecoderMode::Freeze) {
    plan.trainable_groups.erase(ParamGroup::Head);
    plan.frozen_groups.insert(ParamGroup::Head);
  } else {
    plan.frozen_groups.erase(ParamGroup::Head);
    plan.trainable_groups.insert(ParamGroup::Head);
  }
  return resolved;
}

GridResult grid_search(const StagePlan& base_plan, const std::vector<double>& lr_grid,
                       const std::function<VisionTransformer()>& build, const Dataset& train, const Dataset& val,
                       const SeededRng& rng, MetricLog& log) {
  if (lr_grid.empty()) throw ArgumentError("grid_search: empty learning-rate grid");
  if (val.empty()) throw DatasetError("grid_search: needs a validation split");
  std::vector<GridRow> rows;
  for (double lr : lr_grid) {
    StagePlan plan = base_plan;
    plan.schedule.base_lr = lr;
    plan.schedule.lr_scaling = false;
    GridRow row;
    row.lr = lr;
    log.log_info("grid_lr", fmt_double(lr));
    try {
      VisionTransformer model = build();
      const StageResult r = run_stage(plan, model, train, &val, rng, log);
      row.score = r.last_eval ? r.last_eval->primary() : std::nan("");
      row.diverged = !std::isfinite(row.score);
    } catch (const NumericError& e) {
      row.diverged = true;
      row.error = e.what();
    }
    rows.push_back(row);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const GridRow& a, const GridRow& b) {
    if (a.diverged != b.diverged) return !a.diverged;
    if (a.diverged) return false;
    return a.score > b.score;
  });
  GridResult out;
  out.ranked = rows;
  out.best_lr = rows.front().lr;
  return out;
}

}  // namespace tpp
