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

// tpp: command-line driver for backbone pre-training, target parameter
// pre-training, fine-tuning, freeze audits and result tables.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tpp/checkpoint.hpp"
#include "tpp/config.hpp"
#include "tpp/error.hpp"
#include "tpp/pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitAudit = 3;

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out = "runs";
  std::string backbone;
  std::string peft;
};

tpp::ExperimentConfig load_config(const Common& c) {
  tpp::ExperimentConfig cfg = c.config.empty() ? tpp::ExperimentConfig() : tpp::ExperimentConfig::load(c.config);
  if (!c.peft.empty()) cfg.set("peft.spec", c.peft);
  cfg.validate();
  return cfg;
}

fs::path prepare_out(const Common& c) {
  fs::create_directories(c.out);
  return c.out;
}

void echo_run(tpp::MetricLog& log, const tpp::ExperimentConfig& cfg, const Common& c, std::string_view command) {
  log.log_info("command", command);
  log.log_info("seed", std::to_string(c.seed));
  log.log_info("config", cfg.to_text());
}

// Backbone from --backbone, or a randomly initialised one (noted in the log).
tpp::VisionTransformer build_model(const tpp::ExperimentConfig& cfg, const Common& c, bool inherit_decoder,
                                   tpp::MetricLog& log, tpp::MaeConfig* mae) {
  const tpp::SeededRng master(c.seed);
  tpp::VisionTransformer model(tpp::vit_config(cfg), master.derive("init"));
  if (c.backbone.empty()) {
    log.log_info("backbone", "random initialisation (no --backbone given)");
    return model;
  }
  const tpp::Checkpoint ckpt = tpp::load_checkpoint(c.backbone);
  const auto inherited = tpp::load_backbone(model, ckpt, inherit_decoder, tpp::mae_config(cfg));
  log.log_info("backbone", c.backbone);
  if (inherited && mae) {
    *mae = *inherited;
    log.log_info("inherited_decoder", "dim=" + std::to_string(inherited->decoder_dim) +
                                          ",depth=" + std::to_string(inherited->decoder_depth));
  }
  return model;
}

void attach_peft(tpp::VisionTransformer& model, const tpp::ExperimentConfig& cfg, const Common& c) {
  model.registry().set_group_trainable(tpp::ParamGroup::Backbone, false);
  tpp::attach(model, tpp::peft_spec(cfg), tpp::SeededRng(c.seed).derive("peft"));
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

void write_report(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw tpp::IoError(path.string() + ": cannot write");
  os << j.dump(2) << '\n';
}

json report_json(const tpp::EvalReport& r) {
  json j = {{"split", r.split}, {"samples", r.sample_count}, {"metrics", r.metrics}, {"notes", r.notes}};
  return j;
}

int cmd_pretrain(const Common& c) {
  const tpp::ExperimentConfig cfg = load_config(c);
  const fs::path out = prepare_out(c);
  tpp::MetricLog log(out / "pretrain.jsonl");
  echo_run(log, cfg, c, "pretrain-backbone");
  const tpp::SeededRng master(c.seed);
  tpp::VisionTransformer model(tpp::vit_config(cfg), master.derive("init"));
  const tpp::Dataset data = tpp::load_pretrain_data(cfg, c.seed);
  const tpp::StagePlan plan = tpp::pretrain_plan(cfg);
  const tpp::StageResult r = tpp::run_stage(plan, model, data, nullptr, master.derive("pretrain"), log);
  tpp::Checkpoint ckpt = r.after;
  ckpt.provenance = "pretrain-backbone seed=" + std::to_string(c.seed);
  tpp::save_checkpoint(out / "backbone.ckpt", ckpt);
  std::cout << "pretrain-backbone: " << r.steps << " steps, loss " << r.losses.front() << " -> " << r.losses.back()
            << "\nwrote " << (out / "backbone.ckpt").string() << '\n';
  return kExitOk;
}

int cmd_tpp(const Common& c) {
  const tpp::ExperimentConfig cfg = load_config(c);
  const fs::path out = prepare_out(c);
  tpp::MetricLog log(out / "tpp.jsonl");
  echo_run(log, cfg, c, "tpp");
  tpp::StagePlan plan = tpp::tpp_plan(cfg);
  tpp::MaeConfig mae = plan.mae;
  tpp::VisionTransformer model = build_model(cfg, c, plan.objective == tpp::Objective::MAE, log, &mae);
  plan.mae = mae;
  const tpp::PeftSpec spec = tpp::peft_spec(cfg);
  if (!tpp::adds_parameters(spec)) {
    std::cerr << "warning: " << tpp::peft_name(spec) << " adds no parameters; TPP trains the existing biases\n";
  }
  attach_peft(model, cfg, c);
  const tpp::SeededRng master(c.seed);
  const tpp::DecoderMode mode =
      tpp::prepare_tpp_decoder(model, plan, tpp::decoder_mode(cfg), tpp::task_of(cfg), master.derive("tpp"));
  if (plan.objective == tpp::Objective::MAE) log.log_info("decoder_mode", tpp::decoder_mode_name(mode));
  const tpp::DatasetSplits data = tpp::load_task_data(cfg, c.seed);
  const tpp::StageResult r = tpp::run_stage(plan, model, data.train, nullptr, master.derive("tpp"), log);
  const tpp::ParamGroup groups[] = {tpp::ParamGroup::Backbone, tpp::ParamGroup::Target};
  tpp::Checkpoint ckpt = tpp::snapshot(model.registry(), "tpp seed=" + std::to_string(c.seed) + " peft=" + tpp::to_string(spec),
                                       cfg.to_text(), master.state(), groups);
  tpp::save_checkpoint(out / "tpp.ckpt", ckpt);
  model.registry().remove_prefix(tpp::kMaeDecoderPrefix);
  model.registry().set_group_trainable(tpp::ParamGroup::Target, true);
  std::cout << "tpp: " << r.steps << " steps, loss " << r.losses.front() << " -> " << r.losses.back() << '\n'
            << "backbone audit: " << r.audit.summary() << '\n'
            << "trainable ratio (without head): " << percent(model.registry().trainable_ratio()) << "%\n"
            << "wrote " << (out / "tpp.ckpt").string() << '\n';
  return kExitOk;
}

tpp::InitSpec parse_target_init(const std::string& text, const std::string& mode) {
  tpp::InitSpec init;
  if (text.empty() || text == "random") return init;
  init.path = text;
  if (mode == "checkpoint") init.mode = tpp::InitMode::FromCheckpoint;
  else if (mode == "transfer") init.mode = tpp::InitMode::Transfer;
  else if (mode == "upstream") init.mode = tpp::InitMode::Upstream;
  else throw tpp::ConfigError("--target-init-mode must be checkpoint, transfer or upstream");
  return init;
}

int cmd_finetune(const Common& c, const std::string& target_init, const std::string& init_mode) {
  const tpp::ExperimentConfig cfg = load_config(c);
  const fs::path out = prepare_out(c);
  tpp::MetricLog log(out / "finetune.jsonl");
  echo_run(log, cfg, c, "finetune");
  const tpp::StagePlan plan = tpp::finetune_plan(cfg);
  tpp::VisionTransformer model = build_model(cfg, c, false, log, nullptr);
  attach_peft(model, cfg, c);
  const tpp::PeftSpec spec = tpp::peft_spec(cfg);
  const tpp::InitSpec init = parse_target_init(target_init, init_mode);
  const tpp::SeededRng master(c.seed);
  tpp::init_target_params(model, spec, init, master.derive("peft"));
  log.log_info("peft", tpp::to_string(spec));
  log.log_info("target_init", init.mode == tpp::InitMode::Random ? "random"
                                  : std::string(tpp::init_mode_name(init.mode)) + ":" + init.path.string());
  const tpp::Task task = tpp::task_of(cfg);
  const tpp::DatasetSplits data = tpp::load_task_data(cfg, c.seed);
  const std::size_t classes = data.train.num_classes;
  model.add_head(task == tpp::Task::Classification ? tpp::HeadSpec::classification(classes)
                                                   : tpp::HeadSpec::segmentation(classes),
                 master.derive("head"));
  model.registry().set_group_trainable(tpp::ParamGroup::Target, true);
  model.registry().set_group_trainable(tpp::ParamGroup::Head, true);
  const double ratio = model.registry().trainable_ratio();
  log.log_info("trainable_ratio", percent(ratio));
  log.log_info("trainable_params", std::to_string(model.registry().trainable_count()));
  log.log_info("total_params", std::to_string(model.registry().total_count()));
  const tpp::StageResult r = tpp::run_stage(plan, model, data.train, &data.val, master.derive("finetune"), log);
  json report = {{"peft", tpp::to_string(spec)},
                 {"seed", c.seed},
                 {"target_init", init.mode == tpp::InitMode::Random ? "random" : init.path.string()},
                 {"trainable_ratio", ratio},
                 {"backbone_audit", r.audit.summary()}};
  if (r.last_eval) report["val"] = report_json(*r.last_eval);
  if (!data.test.empty()) {
    tpp::EvalReport test = tpp::evaluate(model, data.test, plan.eval_batch_size);
    test.split = "test";
    log.log_eval(tpp::Stage::Finetune, r.steps ? (r.steps - 1) / plan.steps_per_epoch(data.train.size()) : 0, test);
    report["test"] = report_json(test);
  }
  tpp::Checkpoint ckpt = r.after;
  ckpt.provenance = "finetune seed=" + std::to_string(c.seed) + " peft=" + tpp::to_string(spec);
  tpp::save_checkpoint(out / "finetune.ckpt", ckpt);
  write_report(out / "report.json", report);
  std::cout << report.dump(2) << '\n';
  return kExitOk;
}

std::vector<tpp::ParamGroup> parse_groups(const std::string& text) {
  std::vector<tpp::ParamGroup> groups;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    for (auto& ch : item) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    const auto g = tpp::parse_group(item);
    if (!g) throw tpp::ConfigError("unknown group '" + item + "' (expected backbone, target or head)");
    groups.push_back(*g);
  }
  if (groups.empty()) throw tpp::ConfigError("--groups is empty");
  return groups;
}

int cmd_audit(const std::string& before, const std::string& after, const std::string& groups_text) {
  const auto groups = parse_groups(groups_text);
  const tpp::AuditReport r = tpp::audit_freeze(tpp::load_checkpoint(before), tpp::load_checkpoint(after), groups);
  std::cout << "audit " << groups_text << ": " << r.summary() << '\n';
  for (const auto& name : r.changed) std::cout << "  changed: " << name << '\n';
  for (const auto& name : r.corrupted) std::cout << "  corrupted: " << name << '\n';
  return r.pass() ? kExitOk : kExitAudit;
}

struct RunSummary {
  std::string method;
  std::string init;
  double ratio = 0.0;
  std::map<std::string, double> test;
};

RunSummary summarize_log(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw tpp::IoError(path.string() + ": cannot open log");
  RunSummary s;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    if (j.contains("info")) {
      const auto key = j["info"].get<std::string>();
      const auto value = j["value"].get<std::string>();
      if (key == "peft") s.method = value;
      else if (key == "target_init") s.init = value == "random" ? "random" : "pre-trained";
      else if (key == "trainable_ratio") s.ratio = std::stod(value);
    } else if (j.contains("split") && j["split"] == "test") {
      s.test[j["metric"].get<std::string>()] = j["value"].get<double>();
    }
  }
  if (s.method.empty()) throw tpp::ConfigError(path.string() + ": not a finetune log");
  return s;
}

int cmd_report(const std::vector<std::string>& logs, const std::string& format) {
  struct Row {
    std::size_t runs = 0;
    double ratio = 0.0;
    std::map<std::string, double> sums;
  };
  std::map<std::pair<std::string, std::string>, Row> rows;
  std::vector<std::string> metrics;
  for (const auto& path : logs) {
    const RunSummary s = summarize_log(path);
    Row& r = rows[{s.method, s.init}];
    ++r.runs;
    r.ratio = s.ratio;
    for (const auto& [k, v] : s.test) {
      r.sums[k] += v;
      if (std::find(metrics.begin(), metrics.end(), k) == metrics.end()) metrics.push_back(k);
    }
  }
  const bool csv = format == "csv";
  if (!csv && format != "markdown") throw tpp::ConfigError("--format must be markdown or csv");
  std::ostringstream os;
  if (csv) {
    os << "method,target_init,runs";
    for (const auto& m : metrics) os << ',' << m;
    os << ",ratio\n";
  } else {
    os << "| Method | Target init | Runs |";
    for (const auto& m : metrics) os << ' ' << m << " |";
    os << " Ratio (%) |\n|---|---|---|";
    for (std::size_t i = 0; i < metrics.size(); ++i) os << "---|";
    os << "---|\n";
  }
  for (const auto& [key, r] : rows) {
    if (csv) os << key.first << ',' << key.second << ',' << r.runs;
    else os << "| " << key.first << " | " << key.second << " | " << r.runs << " |";
    for (const auto& m : metrics) {
      const auto it = r.sums.find(m);
      const std::string v = it == r.sums.end() ? "" : percent(it->second / static_cast<double>(r.runs));
      os << (csv ? "," : " ") << v << (csv ? "" : " |");
    }
    os << (csv ? "," : " ") << percent(r.ratio) << (csv ? "\n" : " |\n");
  }
  std::cout << os.str();
  return kExitOk;
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> grid;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      grid.push_back(std::stod(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw tpp::ConfigError("--grid: '" + item + "' is not a number");
    }
  }
  if (grid.empty()) throw tpp::ConfigError("--grid is empty");
  return grid;
}

int cmd_grid(const Common& c, const std::string& grid_text, const std::string& target_init, const std::string& init_mode) {
  const tpp::ExperimentConfig cfg = load_config(c);
  const fs::path out = prepare_out(c);
  tpp::MetricLog log(out / "grid.jsonl");
  echo_run(log, cfg, c, "grid-search");
  const std::vector<double> grid = parse_grid(grid_text);
  const tpp::DatasetSplits data = tpp::load_task_data(cfg, c.seed);
  const tpp::InitSpec init = parse_target_init(target_init, init_mode);
  const tpp::SeededRng master(c.seed);
  auto build = [&] {
    tpp::MetricLog scratch;
    tpp::VisionTransformer model = build_model(cfg, c, false, scratch, nullptr);
    attach_peft(model, cfg, c);
    tpp::init_target_params(model, tpp::peft_spec(cfg), init, master.derive("peft"));
    const std::size_t k = data.train.num_classes;
    model.add_head(tpp::task_of(cfg) == tpp::Task::Classification ? tpp::HeadSpec::classification(k)
                                                                   : tpp::HeadSpec::segmentation(k),
                   master.derive("head"));
    return model;
  };
  const tpp::GridResult r =
      tpp::grid_search(tpp::finetune_plan(cfg), grid, build, data.train, data.val, master.derive("finetune"), log);
  json table = json::array();
  std::cout << "| Rank | lr | val score | status |\n|---|---|---|---|\n";
  for (std::size_t i = 0; i < r.ranked.size(); ++i) {
    const auto& row = r.ranked[i];
    std::cout << "| " << i + 1 << " | " << row.lr << " | " << (row.diverged ? "-" : percent(row.score)) << " | "
              << (row.diverged ? "diverged" : "ok") << " |\n";
    table.push_back({{"lr", row.lr}, {"score", row.diverged ? json(nullptr) : json(row.score)},
                     {"diverged", row.diverged}, {"error", row.error}});
  }
  std::cout << "best lr: " << r.best_lr << '\n';
  write_report(out / "grid.json", {{"best_lr", r.best_lr}, {"ranked", table}});
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Target parameter pre-training for parameter-efficient fine-tuning"};
  app.require_subcommand(1);
  Common c;
  auto add_common = [&](CLI::App* sub, bool with_backbone, bool with_peft) {
    sub->add_option("--config", c.config, "experiment config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "master seed");
    sub->add_option("--out", c.out, "output directory");
    if (with_backbone) sub->add_option("--backbone", c.backbone, "backbone checkpoint")->check(CLI::ExistingFile);
    if (with_peft) sub->add_option("--peft", c.peft, "PEFT spec, e.g. adapter:bottleneck=8 (overrides [peft] spec)");
  };

  auto* pretrain = app.add_subcommand("pretrain-backbone", "MAE or DINO pre-training of the backbone");
  add_common(pretrain, false, false);

  auto* tpp_cmd = app.add_subcommand("tpp", "pre-train PEFT target parameters with a frozen backbone");
  add_common(tpp_cmd, true, true);

  std::string target_init = "random";
  std::string init_mode = "checkpoint";
  auto* finetune = app.add_subcommand("finetune", "fine-tune target parameters and head");
  add_common(finetune, true, true);
  finetune->add_option("--target-init", target_init, "random or a checkpoint path");
  finetune->add_option("--target-init-mode", init_mode, "checkpoint, transfer or upstream (provenance label)");

  std::string before, after, groups = "backbone";
  auto* audit = app.add_subcommand("audit", "compare frozen groups of two checkpoints");
  audit->add_option("before", before)->required()->check(CLI::ExistingFile);
  audit->add_option("after", after)->required()->check(CLI::ExistingFile);
  audit->add_option("--groups", groups, "comma-separated groups");

  std::vector<std::string> logs;
  std::string format = "markdown";
  auto* report = app.add_subcommand("report", "aggregate finetune logs into a table");
  report->add_option("logs", logs)->required()->check(CLI::ExistingFile);
  report->add_option("--format", format, "markdown or csv");

  std::string grid;
  auto* grid_cmd = app.add_subcommand("grid-search", "learning-rate grid search on the validation split");
  add_common(grid_cmd, true, true);
  grid_cmd->add_option("--grid", grid, "comma-separated learning rates")->required();
  grid_cmd->add_option("--target-init", target_init, "random or a checkpoint path");
  grid_cmd->add_option("--target-init-mode", init_mode, "checkpoint, transfer or upstream");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*pretrain) return cmd_pretrain(c);
    if (*tpp_cmd) return cmd_tpp(c);
    if (*finetune) return cmd_finetune(c, target_init, init_mode);
    if (*audit) return cmd_audit(before, after, groups);
    if (*report) return cmd_report(logs, format);
    if (*grid_cmd) return cmd_grid(c, grid, target_init, init_mode);
  } catch (const tpp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const tpp::StructuralError& e) {
    std::cerr << "checkpoint mismatch: " << e.what() << '\n';
    return kExitConfig;
  } catch (const tpp::DatasetError& e) {
    std::cerr << "dataset error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const tpp::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kExitConfig;
  } catch (const tpp::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}
