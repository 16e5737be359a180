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

#include "tpp/peft.hpp"

#include <cmath>
#include <memory>
#include <sstream>
#include <vector>

#include "tpp/error.hpp"
#include "tpp/ops.hpp"

namespace tpp {

namespace {

std::string block_prefix(std::string_view mechanism, std::size_t block) {
  return std::string(mechanism) + ".blocks." + std::to_string(block);
}

struct Bottleneck {
  LinearNames down;
  LinearNames up;
};

std::vector<Bottleneck> bottleneck_names(std::string_view mechanism, std::size_t depth) {
  std::vector<Bottleneck> out;
  for (std::size_t i = 0; i < depth; ++i) {
    const std::string p = block_prefix(mechanism, i);
    out.push_back({{p + ".down.weight", p + ".down.bias"}, {p + ".up.weight", p + ".up.bias"}});
  }
  return out;
}

Tensor bottleneck(const ParamRegistry& params, const Bottleneck& n, const Tensor& x) {
  return linear(params, n.up, gelu(linear(params, n.down, x)));
}

class AdapterHook final : public BlockHook {
 public:
  explicit AdapterHook(std::size_t depth) : names_(bottleneck_names("adapter", depth)) {}
  std::string_view mechanism() const override { return "adapter"; }

  Tensor on_mlp(const ParamRegistry& params, std::size_t block, const Tensor&, const Tensor& mlp_output) const override {
    return add(mlp_output, bottleneck(params, names_[block], mlp_output));
  }

 private:
  std::vector<Bottleneck> names_;
};

class AdaptFormerHook final : public BlockHook {
 public:
  AdaptFormerHook(std::size_t depth, double scale) : names_(bottleneck_names("adaptformer", depth)), scale_(scale) {}
  std::string_view mechanism() const override { return "adaptformer"; }

  Tensor on_mlp(const ParamRegistry& params, std::size_t block, const Tensor& mlp_input,
                const Tensor& mlp_output) const override {
    return add(mlp_output, scale(bottleneck(params, names_[block], mlp_input), scale_));
  }

 private:
  std::vector<Bottleneck> names_;
  double scale_;
};

std::string prompt_name(std::size_t layer) { return "vpt.prompts." + std::to_string(layer); }

class VptHook final : public BlockHook {
 public:
  VptHook(VptSpec spec, std::size_t dim) : spec_(spec), dim_(dim) {}
  std::string_view mechanism() const override { return "vpt"; }

  Tensor on_block_input(const ParamRegistry& params, std::size_t block, const Tensor& seq) const override {
    const std::size_t p = spec_.num_tokens;
    if (block > 0 && spec_.mode == VptMode::Shallow) return seq;
    const std::size_t b = seq.dim(0);
    const std::size_t len = seq.dim(1);
    const Tensor prompts = expand(params.get(prompt_name(block)), {b, p, dim_});
    const Tensor cls = slice(seq, 1, 0, 1);
    // Layer 0 inserts the prompt slots; deeper layers overwrite them.
    const std::size_t rest_start = block == 0 ? 1 : 1 + p;
    const Tensor rest = slice(seq, 1, rest_start, len - rest_start);
    return concat({cls, prompts, rest}, 1);
  }

  Tensor on_blocks_end(const ParamRegistry&, const Tensor& seq) const override {
    const std::size_t p = spec_.num_tokens;
    const std::size_t len = seq.dim(1);
    return concat({slice(seq, 1, 0, 1), slice(seq, 1, 1 + p, len - 1 - p)}, 1);
  }

 private:
  VptSpec spec_;
  std::size_t dim_;
};

struct SsfNames {
  std::string scale;
  std::string shift;
};

std::vector<std::vector<SsfNames>> ssf_names(std::size_t depth) {
  std::vector<std::vector<SsfNames>> out(depth);
  for (std::size_t i = 0; i < depth; ++i) {
    for (Site s : kAllSites) {
      const std::string p = block_prefix("ssf", i) + "." + std::string(site_name(s));
      out[i].push_back({p + ".scale", p + ".shift"});
    }
  }
  return out;
}

class SsfHook final : public BlockHook {
 public:
  explicit SsfHook(std::size_t depth) : names_(ssf_names(depth)) {}
  std::string_view mechanism() const override { return "ssf"; }

  Tensor on_sublayer(const ParamRegistry& params, std::size_t block, Site site, const Tensor&,
                     const Tensor& output) const override {
    const SsfNames& n = names_[block][static_cast<std::size_t>(site)];
    return add(mul(output, params.get(n.scale)), params.get(n.shift));
  }

 private:
  std::vector<std::vector<SsfNames>> names_;
};

struct LoraNames {
  std::string a;
  std::string b;
};

class LoraHook final : public BlockHook {
 public:
  LoraHook(LoraSpec spec, std::size_t depth) : spec_(spec), factor_(spec.alpha / static_cast<double>(spec.rank)) {
    for (std::size_t i = 0; i < depth; ++i) {
      const std::string p = block_prefix("lora", i);
      query_.push_back({p + ".query.A", p + ".query.B"});
      value_.push_back({p + ".value.A", p + ".value.B"});
    }
  }
  std::string_view mechanism() const override { return "lora"; }

  Tensor on_sublayer(const ParamRegistry& params, std::size_t block, Site site, const Tensor& input,
                     const Tensor& output) const override {
    const LoraNames* n = nullptr;
    if (site == Site::Query && spec_.query) n = &query_[block];
    if (site == Site::Value && spec_.value) n = &value_[block];
    if (!n) return output;
    const Tensor delta = matmul(matmul(input, params.get(n->a)), params.get(n->b));
    return add(output, scale(delta, factor_));
  }

 private:
  LoraSpec spec_;
  double factor_;
  std::vector<LoraNames> query_;
  std::vector<LoraNames> value_;
};

class BitFitHook final : public BlockHook {
 public:
  std::string_view mechanism() const override { return "bitfit"; }
};

// Default (identity-preserving) value of a created parameter.
struct NewParam {
  std::string name;
  Shape shape;
  enum class Init { Zeros, Ones, KaimingUniform, Normal, TruncNormal } init;
  double arg = 0.0;
};

std::vector<NewParam> planned_params(const PeftSpec& spec, const ViTConfig& cfg) {
  const std::size_t d = cfg.embed_dim;
  std::vector<NewParam> out;
  auto add_bottleneck = [&](std::string_view mech, std::size_t r) {
    if (r == 0) throw ArgumentError(std::string(mech) + ": bottleneck must be >= 1");
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (const auto& n : bottleneck_names(mech, cfg.depth)) {
      out.push_back({n.down.weight, {d, r}, NewParam::Init::KaimingUniform, bound});
      out.push_back({n.down.bias, {r}, NewParam::Init::Zeros});
      out.push_back({n.up.weight, {r, d}, NewParam::Init::Zeros});
      out.push_back({n.up.bias, {d}, NewParam::Init::Zeros});
    }
  };
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, AdapterSpec>) {
          add_bottleneck("adapter", s.bottleneck);
        } else if constexpr (std::is_same_v<T, AdaptFormerSpec>) {
          add_bottleneck("adaptformer", s.bottleneck);
        } else if constexpr (std::is_same_v<T, VptSpec>) {
          if (s.num_tokens == 0) throw ArgumentError("vpt: num_tokens must be >= 1");
          const std::size_t layers = s.mode == VptMode::Deep ? cfg.depth : 1;
          for (std::size_t i = 0; i < layers; ++i)
            out.push_back({prompt_name(i), {1, s.num_tokens, d}, NewParam::Init::TruncNormal, 0.02});
        } else if constexpr (std::is_same_v<T, SsfSpec>) {
          const auto names = ssf_names(cfg.depth);
          for (std::size_t i = 0; i < cfg.depth; ++i)
            for (Site site : kAllSites) {
              const std::size_t ch = site == Site::Fc1 ? cfg.mlp_hidden() : d;
              const auto& n = names[i][static_cast<std::size_t>(site)];
              out.push_back({n.scale, {ch}, NewParam::Init::Ones});
              out.push_back({n.shift, {ch}, NewParam::Init::Zeros});
            }
        } else if constexpr (std::is_same_v<T, LoraSpec>) {
          if (s.rank == 0) throw ArgumentError("lora: rank must be >= 1");
          if (s.rank > d) throw ArgumentError("lora: rank " + std::to_string(s.rank) + " exceeds embed_dim " + std::to_string(d));
          const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
          for (std::size_t i = 0; i < cfg.depth; ++i) {
            const std::string p = block_prefix("lora", i);
            for (const char* target : {"query", "value"}) {
              if ((std::string_view(target) == "query" && !s.query) || (std::string_view(target) == "value" && !s.value))
                continue;
              out.push_back({p + "." + target + ".A", {d, s.rank}, NewParam::Init::Normal, stddev});
              out.push_back({p + "." + target + ".B", {s.rank, d}, NewParam::Init::Zeros});
            }
          }
        }
      },
      spec);
  return out;
}

Tensor initial_value(const NewParam& p, const SeededRng& rng) {
  Tensor t(p.shape);
  auto data = t.mutable_data();
  SeededRng local = rng.derive(p.name);
  switch (p.init) {
    case NewParam::Init::Zeros: break;
    case NewParam::Init::Ones: std::fill(data.begin(), data.end(), 1.0); break;
    case NewParam::Init::KaimingUniform:
      for (auto& v : data) v = local.uniform(-p.arg, p.arg);
      break;
    case NewParam::Init::Normal:
      for (auto& v : data) v = local.normal(0.0, p.arg);
      break;
    case NewParam::Init::TruncNormal:
      for (auto& v : data) v = local.truncated_normal(p.arg);
      break;
  }
  return t;
}

std::shared_ptr<const BlockHook> make_hook(const PeftSpec& spec, const ViTConfig& cfg) {
  return std::visit(
      [&](const auto& s) -> std::shared_ptr<const BlockHook> {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, AdapterSpec>) return std::make_shared<AdapterHook>(cfg.depth);
        if constexpr (std::is_same_v<T, AdaptFormerSpec>) return std::make_shared<AdaptFormerHook>(cfg.depth, s.scale);
        if constexpr (std::is_same_v<T, VptSpec>) return std::make_shared<VptHook>(s, cfg.embed_dim);
        if constexpr (std::is_same_v<T, SsfSpec>) return std::make_shared<SsfHook>(cfg.depth);
        if constexpr (std::is_same_v<T, BitFitSpec>) return std::make_shared<BitFitHook>();
        if constexpr (std::is_same_v<T, LoraSpec>) return std::make_shared<LoraHook>(s, cfg.depth);
      },
      spec);
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string_view peft_name(const PeftSpec& spec) {
  static constexpr std::string_view names[] = {"adapter", "adaptformer", "vpt", "ssf", "bitfit", "lora"};
  return names[spec.index()];
}

bool adds_parameters(const PeftSpec& spec) { return !std::holds_alternative<BitFitSpec>(spec); }

std::string to_string(const PeftSpec& spec) {
  std::string out(peft_name(spec));
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, AdapterSpec>) {
          out += ":bottleneck=" + std::to_string(s.bottleneck);
        } else if constexpr (std::is_same_v<T, AdaptFormerSpec>) {
          out += ":bottleneck=" + std::to_string(s.bottleneck) + ",scale=" + format_double(s.scale);
        } else if constexpr (std::is_same_v<T, VptSpec>) {
          out += ":tokens=" + std::to_string(s.num_tokens) + ",mode=" + (s.mode == VptMode::Deep ? "deep" : "shallow");
        } else if constexpr (std::is_same_v<T, LoraSpec>) {
          std::string targets;
          if (s.query) targets = "query";
          if (s.value) targets += targets.empty() ? "value" : "+value";
          out += ":rank=" + std::to_string(s.rank) + ",alpha=" + format_double(s.alpha) + ",targets=" + targets;
        }
      },
      spec);
  return out;
}

PeftSpec parse_peft_spec(std::string_view text) {
  const auto colon = text.find(':');
  const std::string method(text.substr(0, colon));
  std::vector<std::pair<std::string, std::string>> kv;
  if (colon != std::string_view::npos) {
    std::string rest(text.substr(colon + 1));
    std::istringstream is(rest);
    std::string item;
    while (std::getline(is, item, ',')) {
      if (item.empty()) continue;
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("peft spec: expected key=value, got '" + item + "'");
      kv.emplace_back(item.substr(0, eq), item.substr(eq + 1));
    }
  }
  auto to_size = [](const std::string& key, const std::string& v) -> std::size_t {
    try {
      std::size_t pos = 0;
      const long long n = std::stoll(v, &pos);
      if (pos != v.size() || n < 1) throw ConfigError("");
      return static_cast<std::size_t>(n);
    } catch (...) {
      throw ConfigError("peft spec: " + key + " must be a positive integer, got '" + v + "'");
    }
  };
  auto to_double = [](const std::string& key, const std::string& v) {
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw ConfigError("");
      return d;
    } catch (...) {
      throw ConfigError("peft spec: " + key + " must be a number, got '" + v + "'");
    }
  };
  auto unknown = [&](const std::string& key) { return ConfigError("peft spec: unknown key '" + key + "' for " + method); };

  if (method == "adapter") {
    AdapterSpec s;
    for (const auto& [k, v] : kv) {
      if (k == "bottleneck" || k == "r") s.bottleneck = to_size(k, v);
      else throw unknown(k);
    }
    return s;
  }
  if (method == "adaptformer") {
    AdaptFormerSpec s;
    for (const auto& [k, v] : kv) {
      if (k == "bottleneck" || k == "r") s.bottleneck = to_size(k, v);
      else if (k == "scale") s.scale = to_double(k, v);
      else throw unknown(k);
    }
    return s;
  }
  if (method == "vpt") {
    VptSpec s;
    for (const auto& [k, v] : kv) {
      if (k == "tokens") s.num_tokens = to_size(k, v);
      else if (k == "mode" && (v == "deep" || v == "shallow")) s.mode = v == "deep" ? VptMode::Deep : VptMode::Shallow;
      else if (k == "mode") throw ConfigError("peft spec: vpt mode must be deep or shallow");
      else throw unknown(k);
    }
    return s;
  }
  if (method == "ssf" || method == "bitfit") {
    if (!kv.empty()) throw unknown(kv.front().first);
    if (method == "ssf") return SsfSpec{};
    return BitFitSpec{};
  }
  if (method == "lora") {
    LoraSpec s;
    for (const auto& [k, v] : kv) {
      if (k == "rank") s.rank = to_size(k, v);
      else if (k == "alpha") s.alpha = to_double(k, v);
      else if (k == "targets") {
        s.query = v.find("query") != std::string::npos;
        s.value = v.find("value") != std::string::npos;
        if (!s.query && !s.value) throw ConfigError("peft spec: lora targets must name query and/or value");
      } else {
        throw unknown(k);
      }
    }
    return s;
  }
  throw ConfigError("unknown PEFT method '" + method + "' (expected adapter, adaptformer, vpt, ssf, bitfit or lora)");
}

void attach(VisionTransformer& model, const PeftSpec& spec, const SeededRng& rng) {
  if (model.hook()) throw StateError("a PEFT mechanism (" + std::string(model.hook()->mechanism()) + ") is already attached");
  ParamRegistry& reg = model.registry();
  for (const auto& p : reg.params()) {
    if (p.group == ParamGroup::Backbone && p.trainable) {
      throw StateError("attach: backbone parameter " + p.name + " is not frozen");
    }
  }
  const auto planned = planned_params(spec, model.config());
  model.set_hook(make_hook(spec, model.config()));
  for (const auto& p : planned) reg.add(p.name, initial_value(p, rng), ParamGroup::Target, true);
  if (std::holds_alternative<BitFitSpec>(spec)) {
    std::vector<std::string> biases;
    for (const auto& p : reg.params())
      if (p.group == ParamGroup::Backbone && std::string_view(p.name).ends_with(".bias")) biases.push_back(p.name);
    for (const auto& name : biases) {
      reg.set_group(name, ParamGroup::Target);
      reg.set_trainable(name, true);
    }
  }
}

void reset_target_params(VisionTransformer& model, const PeftSpec& spec, const SeededRng& rng) {
  ParamRegistry& reg = model.registry();
  for (const auto& p : planned_params(spec, model.config())) {
    Tensor handle = reg.get(p.name);
    handle.assign(initial_value(p, rng));
  }
}

}  // namespace tpp
