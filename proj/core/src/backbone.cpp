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

#include "tpp/backbone.hpp"

#include <cmath>
#include <string>

#include "tpp/error.hpp"
#include "tpp/ops.hpp"

namespace tpp {

namespace {

constexpr double kInitStd = 0.02;

Tensor trunc_normal(Shape shape, double stddev, SeededRng rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.truncated_normal(stddev);
  return t;
}

void add_linear(ParamRegistry& params, const LinearNames& names, std::size_t in, std::size_t out, ParamGroup group,
                const SeededRng& rng) {
  params.add(names.weight, trunc_normal({in, out}, kInitStd, rng.derive(names.weight)), group);
  params.add(names.bias, Tensor::zeros({out}), group);
}

void add_norm(ParamRegistry& params, const LinearNames& names, std::size_t dim, ParamGroup group) {
  params.add(names.weight, Tensor::ones({dim}), group);
  params.add(names.bias, Tensor::zeros({dim}), group);
}

LinearNames names_for(const std::string& prefix) { return {prefix + ".weight", prefix + ".bias"}; }

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  const std::size_t b = q.dim(0);
  const std::size_t t = q.dim(1);
  const std::size_t d = q.dim(2);
  const std::size_t dh = d / heads;
  const Tensor qh = permute(reshape(q, {b, t, heads, dh}), {0, 2, 1, 3});
  const Tensor kt = permute(reshape(k, {b, t, heads, dh}), {0, 2, 3, 1});
  const Tensor vh = permute(reshape(v, {b, t, heads, dh}), {0, 2, 1, 3});
  // Scaling by 1/sqrt(dh) is folded into the softmax temperature.
  const Tensor weights = softmax(matmul(qh, kt), std::sqrt(static_cast<double>(dh)));
  const Tensor ctx = matmul(weights, vh);
  return reshape(permute(ctx, {0, 2, 1, 3}), {b, t, d});
}

}  // namespace

std::string_view group_name(ParamGroup group) {
  switch (group) {
    case ParamGroup::Backbone: return "backbone";
    case ParamGroup::Target: return "target";
    case ParamGroup::Head: return "head";
  }
  return "?";
}

std::optional<ParamGroup> parse_group(std::string_view text) {
  if (text == "backbone" || text == "Backbone") return ParamGroup::Backbone;
  if (text == "target" || text == "Target") return ParamGroup::Target;
  if (text == "head" || text == "Head") return ParamGroup::Head;
  return std::nullopt;
}

// ---- ParamRegistry ----

Param& ParamRegistry::add(std::string name, Tensor tensor, ParamGroup group, bool trainable) {
  if (contains(name)) throw StateError("duplicate parameter name: " + name);
  if (!tensor.is_leaf()) throw StateError("parameter " + name + " must be a leaf tensor");
  tensor.set_requires_grad(trainable);
  index_.emplace(name, params_.size());
  params_.push_back(Param{std::move(name), std::move(tensor), group, trainable});
  return params_.back();
}

const Param& ParamRegistry::param(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw StructuralError("unknown parameter: " + std::string(name));
  return params_[it->second];
}

Param& ParamRegistry::mutable_param(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw StructuralError("unknown parameter: " + std::string(name));
  return params_[it->second];
}

void ParamRegistry::set_trainable(std::string_view name, bool trainable) {
  Param& p = mutable_param(name);
  p.trainable = trainable;
  p.tensor.set_requires_grad(trainable);
}

void ParamRegistry::set_group(std::string_view name, ParamGroup group) { mutable_param(name).group = group; }

void ParamRegistry::set_group_trainable(ParamGroup group, bool trainable) {
  for (auto& p : params_) {
    if (p.group != group) continue;
    p.trainable = trainable;
    p.tensor.set_requires_grad(trainable);
  }
}

std::size_t ParamRegistry::remove_prefix(std::string_view prefix) {
  std::vector<Param> kept;
  std::size_t removed = 0;
  for (auto& p : params_) {
    if (std::string_view(p.name).starts_with(prefix)) {
      ++removed;
    } else {
      kept.push_back(std::move(p));
    }
  }
  params_ = std::move(kept);
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_.emplace(params_[i].name, i);
  return removed;
}

std::size_t ParamRegistry::count(ParamGroup group) const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.group == group) n += p.tensor.numel();
  return n;
}

std::size_t ParamRegistry::total_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::size_t ParamRegistry::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.trainable) n += p.tensor.numel();
  return n;
}

double ParamRegistry::trainable_ratio() const {
  const std::size_t total = total_count();
  if (total == 0) return 0.0;
  return 100.0 * static_cast<double>(trainable_count()) / static_cast<double>(total);
}

bool ParamRegistry::has_group(ParamGroup group) const {
  for (const auto& p : params_)
    if (p.group == group) return true;
  return false;
}

void ParamRegistry::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void ParamRegistry::drop_grads() {
  for (auto& p : params_) p.tensor.drop_grad();
}

ParamRegistry ParamRegistry::detached_copy() const {
  ParamRegistry copy;
  for (const auto& p : params_) {
    if (p.trainable) {
      copy.add(p.name, p.tensor.clone(), p.group, false);
    } else {
      copy.index_.emplace(p.name, copy.params_.size());
      copy.params_.push_back(p);
    }
  }
  return copy;
}

std::size_t count_params(const ParamRegistry& registry, ParamGroup group) { return registry.count(group); }

double trainable_ratio(const ParamRegistry& registry) { return registry.trainable_ratio(); }

// ---- configuration & patches ----

std::string_view pooling_name(Pooling pooling) { return pooling == Pooling::ClassToken ? "cls" : "mean"; }

Pooling parse_pooling(std::string_view text) {
  if (text == "cls") return Pooling::ClassToken;
  if (text == "mean") return Pooling::MeanPatch;
  throw ArgumentError("unknown pooling '" + std::string(text) + "' (expected cls or mean)");
}

void ViTConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ArgumentError("image_size " + std::to_string(image_size) + " must be a positive multiple of patch_size " +
                        std::to_string(patch_size));
  }
  if (num_heads == 0 || embed_dim == 0 || embed_dim % num_heads != 0) {
    throw ArgumentError("embed_dim " + std::to_string(embed_dim) + " must be divisible by num_heads " +
                        std::to_string(num_heads));
  }
  if (mlp_ratio == 0 || num_channels == 0) throw ArgumentError("mlp_ratio and num_channels must be positive");
}

Tensor patchify(const Tensor& image, std::size_t p) {
  const bool batched = image.rank() == 4;
  if (!batched && image.rank() != 3) throw DimensionError("patchify expects [C,H,W] or [B,C,H,W], got " + shape_to_string(image.shape()));
  const std::size_t b = batched ? image.dim(0) : 1;
  const std::size_t c = image.dim(-3);
  const std::size_t h = image.dim(-2);
  const std::size_t w = image.dim(-1);
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw ArgumentError("patchify: " + shape_to_string(image.shape()) + " not divisible by patch size " + std::to_string(p));
  }
  const std::size_t gh = h / p;
  const std::size_t gw = w / p;
  Tensor x = reshape(image, {b, c, gh, p, gw, p});
  x = permute(x, {0, 2, 4, 1, 3, 5});
  if (batched) return reshape(x, {b, gh * gw, c * p * p});
  return reshape(x, {gh * gw, c * p * p});
}

Tensor unpatchify(const Tensor& patches, std::size_t c, std::size_t h, std::size_t w, std::size_t p) {
  const bool batched = patches.rank() == 3;
  if (!batched && patches.rank() != 2) throw DimensionError("unpatchify expects [N,P] or [B,N,P], got " + shape_to_string(patches.shape()));
  if (p == 0 || h % p != 0 || w % p != 0) throw ArgumentError("unpatchify: image size not divisible by patch size");
  const std::size_t gh = h / p;
  const std::size_t gw = w / p;
  if (patches.dim(-2) != gh * gw || patches.dim(-1) != c * p * p) {
    throw DimensionError("unpatchify: " + shape_to_string(patches.shape()) + " does not match a " + std::to_string(gh) +
                         "x" + std::to_string(gw) + " grid of " + std::to_string(c * p * p) + "-value patches");
  }
  const std::size_t b = batched ? patches.dim(0) : 1;
  Tensor x = reshape(patches, {b, gh, gw, c, p, p});
  x = permute(x, {0, 3, 1, 4, 2, 5});
  if (batched) return reshape(x, {b, c, h, w});
  return reshape(x, {c, h, w});
}

std::string_view site_name(Site site) {
  switch (site) {
    case Site::Norm1: return "norm1";
    case Site::Query: return "query";
    case Site::Key: return "key";
    case Site::Value: return "value";
    case Site::Proj: return "proj";
    case Site::Norm2: return "norm2";
    case Site::Fc1: return "fc1";
    case Site::Fc2: return "fc2";
  }
  return "?";
}

// ---- hooks ----

Tensor BlockHook::on_block_input(const ParamRegistry&, std::size_t, const Tensor& seq) const { return seq; }

Tensor BlockHook::on_sublayer(const ParamRegistry&, std::size_t, Site, const Tensor&, const Tensor& output) const {
  return output;
}

Tensor BlockHook::on_mlp(const ParamRegistry&, std::size_t, const Tensor&, const Tensor& mlp_output) const {
  return mlp_output;
}

Tensor BlockHook::on_blocks_end(const ParamRegistry&, const Tensor& seq) const { return seq; }

// ---- blocks ----

LinearNames linear_names(const std::string& prefix) { return names_for(prefix); }

void register_linear(ParamRegistry& params, const LinearNames& names, std::size_t in, std::size_t out,
                     ParamGroup group, const SeededRng& rng) {
  add_linear(params, names, in, out, group, rng);
}

void register_norm(ParamRegistry& params, const LinearNames& names, std::size_t dim, ParamGroup group) {
  add_norm(params, names, dim, group);
}

Tensor init_trunc_normal(Shape shape, const SeededRng& rng, std::string_view name) {
  return trunc_normal(std::move(shape), kInitStd, rng.derive(name));
}

Tensor linear(const ParamRegistry& params, const LinearNames& names, const Tensor& x) {
  return add(matmul(x, params.get(names.weight)), params.get(names.bias));
}

BlockNames block_names(const std::string& prefix) {
  return {names_for(prefix + ".norm1"),     names_for(prefix + ".attn.query"), names_for(prefix + ".attn.key"),
          names_for(prefix + ".attn.value"), names_for(prefix + ".attn.proj"),  names_for(prefix + ".norm2"),
          names_for(prefix + ".mlp.fc1"),    names_for(prefix + ".mlp.fc2")};
}

BlockNames register_block(ParamRegistry& params, const std::string& prefix, std::size_t dim, std::size_t hidden,
                          ParamGroup group, const SeededRng& rng) {
  const BlockNames n = block_names(prefix);
  add_norm(params, n.norm1, dim, group);
  add_linear(params, n.query, dim, dim, group, rng);
  add_linear(params, n.key, dim, dim, group, rng);
  add_linear(params, n.value, dim, dim, group, rng);
  add_linear(params, n.proj, dim, dim, group, rng);
  add_norm(params, n.norm2, dim, group);
  add_linear(params, n.fc1, dim, hidden, group, rng);
  add_linear(params, n.fc2, hidden, dim, group, rng);
  return n;
}

Tensor transformer_block(const ParamRegistry& params, const BlockNames& n, std::size_t num_heads, double eps,
                         const Tensor& x, const BlockHook* hook, std::size_t block_index) {
  auto site = [&](Site s, const Tensor& in, Tensor out) {
    return hook ? hook->on_sublayer(params, block_index, s, in, out) : out;
  };
  const Tensor h = site(Site::Norm1, x, layer_norm(x, params.get(n.norm1.weight), params.get(n.norm1.bias), eps));
  const Tensor q = site(Site::Query, h, linear(params, n.query, h));
  const Tensor k = site(Site::Key, h, linear(params, n.key, h));
  const Tensor v = site(Site::Value, h, linear(params, n.value, h));
  const Tensor ctx = attention(q, k, v, num_heads);
  const Tensor o = site(Site::Proj, ctx, linear(params, n.proj, ctx));
  const Tensor x1 = add(x, o);
  const Tensor h2 = site(Site::Norm2, x1, layer_norm(x1, params.get(n.norm2.weight), params.get(n.norm2.bias), eps));
  const Tensor f1 = site(Site::Fc1, h2, linear(params, n.fc1, h2));
  const Tensor a = gelu(f1);
  const Tensor f2 = site(Site::Fc2, a, linear(params, n.fc2, a));
  const Tensor m = hook ? hook->on_mlp(params, block_index, h2, f2) : f2;
  return add(x1, m);
}

Tensor grid_resample_matrix(std::size_t in_grid, std::size_t out_grid) {
  if (in_grid == 0 || out_grid == 0) throw ArgumentError("grid_resample_matrix: grids must be positive");
  std::vector<std::pair<std::size_t, double>> lo(out_grid);
  std::vector<std::pair<std::size_t, double>> hi(out_grid);
  for (std::size_t i = 0; i < out_grid; ++i) {
    const double src = out_grid == 1 ? 0.5 * static_cast<double>(in_grid - 1)
                                     : static_cast<double>(i) * static_cast<double>(in_grid - 1) /
                                           static_cast<double>(out_grid - 1);
    const auto i0 = std::min(static_cast<std::size_t>(std::floor(src)), in_grid - 1);
    const std::size_t i1 = std::min(i0 + 1, in_grid - 1);
    const double f = src - static_cast<double>(i0);
    lo[i] = {i0, 1.0 - f};
    hi[i] = {i1, f};
  }
  Tensor m({out_grid * out_grid, in_grid * in_grid});
  auto data = m.mutable_data();
  for (std::size_t r = 0; r < out_grid; ++r)
    for (std::size_t c = 0; c < out_grid; ++c) {
      const std::size_t row = (r * out_grid + c) * in_grid * in_grid;
      for (const auto& [ri, rw] : {lo[r], hi[r]})
        for (const auto& [ci, cw] : {lo[c], hi[c]}) data[row + ri * in_grid + ci] += rw * cw;
    }
  return m;
}

// ---- VisionTransformer ----

VisionTransformer::VisionTransformer(ViTConfig config, const SeededRng& init_rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.embed_dim;
  const ParamGroup g = ParamGroup::Backbone;
  add_linear(registry_, names_for("patch_embed"), config_.patch_dim(), d, g, init_rng);
  registry_.add("cls_token", trunc_normal({1, 1, d}, kInitStd, init_rng.derive("cls_token")), g);
  registry_.add("pos_embed", trunc_normal({1, config_.num_patches() + 1, d}, kInitStd, init_rng.derive("pos_embed")), g);
  for (std::size_t i = 0; i < config_.depth; ++i) {
    blocks_.push_back(register_block(registry_, "blocks." + std::to_string(i), d, config_.mlp_hidden(), g, init_rng));
  }
  add_norm(registry_, names_for("norm"), d, g);
}

void VisionTransformer::set_hook(std::shared_ptr<const BlockHook> hook) {
  if (hook_) throw StateError("a PEFT mechanism (" + std::string(hook_->mechanism()) + ") is already attached");
  hook_ = std::move(hook);
}

void VisionTransformer::add_head(const HeadSpec& spec, const SeededRng& init_rng) {
  if (head_) throw StateError("model already has a head");
  if (spec.num_classes < 2) throw ArgumentError("heads need at least two classes");
  const std::size_t d = config_.embed_dim;
  if (spec.kind == HeadSpec::Kind::Classification) {
    add_linear(registry_, names_for("head"), d, spec.num_classes, ParamGroup::Head, init_rng);
  } else {
    const std::size_t p = config_.patch_size;
    add_linear(registry_, names_for("seg_decoder"), d, spec.num_classes * p * p, ParamGroup::Head, init_rng);
  }
  head_ = spec;
}

void VisionTransformer::remove_head() {
  registry_.remove_prefix("head.");
  registry_.remove_prefix("seg_decoder.");
  head_.reset();
}

Tensor VisionTransformer::embed(const Tensor& patches) const {
  if (patches.dim(-1) != config_.patch_dim()) {
    throw DimensionError("embed: patch length " + std::to_string(patches.dim(-1)) + " != " +
                         std::to_string(config_.patch_dim()));
  }
  return linear(registry_, names_for("patch_embed"), patches);
}

Tensor VisionTransformer::add_positional(const Tensor& tokens) const {
  const std::size_t n = config_.num_patches();
  const std::size_t d = config_.embed_dim;
  const Tensor patch_pos = slice(registry_.get("pos_embed"), 1, 1, n);
  const std::size_t count = tokens.dim(-2);
  if (count == n) return add(tokens, patch_pos);
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(count))));
  if (g * g != count) throw DimensionError("add_positional: " + std::to_string(count) + " tokens are not a square grid");
  const Tensor resampled = matmul(grid_resample_matrix(config_.grid(), g), reshape(patch_pos, {n, d}));
  return add(tokens, resampled);
}

Tensor VisionTransformer::with_class_token(const Tensor& tokens) const {
  const std::size_t b = tokens.dim(0);
  const std::size_t d = config_.embed_dim;
  const Tensor cls = add(registry_.get("cls_token"), slice(registry_.get("pos_embed"), 1, 0, 1));
  return concat({expand(cls, {b, 1, d}), tokens}, 1);
}

Tensor VisionTransformer::run_blocks(const Tensor& seq) const {
  Tensor x = seq;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (hook_) x = hook_->on_block_input(registry_, i, x);
    x = transformer_block(registry_, blocks_[i], config_.num_heads, config_.norm_eps, x, hook_.get(), i);
  }
  if (hook_) x = hook_->on_blocks_end(registry_, x);
  return layer_norm(x, registry_.get("norm.weight"), registry_.get("norm.bias"), config_.norm_eps);
}

Tensor VisionTransformer::forward_features(const Tensor& tokens) const {
  if (tokens.rank() != 3 || tokens.dim(-1) != config_.embed_dim) {
    throw DimensionError("forward_features: tokens " + shape_to_string(tokens.shape()) + " do not have embed_dim " +
                         std::to_string(config_.embed_dim));
  }
  return run_blocks(with_class_token(add_positional(tokens)));
}

Tensor VisionTransformer::encode_images(const Tensor& images) const {
  return forward_features(embed(patchify(images, config_.patch_size)));
}

Tensor VisionTransformer::pooled(const Tensor& images) const {
  const Tensor f = encode_images(images);
  if (config_.pooling == Pooling::ClassToken) return reshape(slice(f, 1, 0, 1), {f.dim(0), config_.embed_dim});
  const std::size_t n = f.dim(1) - 1;
  const Tensor avg({1, 1, n}, 1.0 / static_cast<double>(n));
  return reshape(matmul(avg, slice(f, 1, 1, n)), {f.dim(0), config_.embed_dim});
}

Tensor VisionTransformer::classify(const Tensor& images) const {
  if (!head_ || head_->kind != HeadSpec::Kind::Classification) throw StateError("classify: no classification head");
  return linear(registry_, names_for("head"), pooled(images));
}

Tensor VisionTransformer::segment(const Tensor& images) const {
  if (!head_ || head_->kind != HeadSpec::Kind::Segmentation) throw StateError("segment: no segmentation decoder");
  return seg_decoder_forward(registry_, encode_images(images),
                             {head_->num_classes, config_.patch_size, config_.image_size});
}

VisionTransformer VisionTransformer::detached_copy() const {
  VisionTransformer copy;
  copy.config_ = config_;
  copy.registry_ = registry_.detached_copy();
  copy.blocks_ = blocks_;
  copy.hook_ = hook_;
  copy.head_ = head_;
  return copy;
}

Tensor seg_decoder_forward(const ParamRegistry& params, const Tensor& features, const SegDecoderSpec& spec) {
  const std::size_t p = spec.patch_size;
  const std::size_t grid = spec.image_size / p;
  if (features.rank() != 3 || features.dim(1) != grid * grid + 1) {
    throw DimensionError("seg_decoder: features " + shape_to_string(features.shape()) + " do not match a " +
                         std::to_string(grid) + "x" + std::to_string(grid) + " patch grid");
  }
  const Tensor tokens = slice(features, 1, 1, grid * grid);
  const Tensor logits = linear(params, names_for("seg_decoder"), tokens);
  return unpatchify(logits, spec.num_classes, spec.image_size, spec.image_size, p);
}

}  // namespace tpp
