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

#include "tpp/pretext.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tpp/data.hpp"
#include "tpp/error.hpp"
#include "tpp/ops.hpp"

namespace tpp {

namespace {

const std::string kDec(kMaeDecoderPrefix);
const std::string kHead(kDinoHeadPrefix);

std::string dec(const std::string& suffix) { return kDec + suffix; }

}  // namespace

// ---- masked reconstruction ----

std::size_t MaeConfig::resolved_dim(const ViTConfig& vit) const {
  return decoder_dim ? decoder_dim : std::max<std::size_t>(vit.embed_dim / 2, 1);
}

std::size_t MaeConfig::resolved_heads(const ViTConfig& vit) const {
  const std::size_t dd = resolved_dim(vit);
  if (decoder_heads) {
    if (dd % decoder_heads) throw ConfigError("decoder_heads must divide decoder_dim");
    return decoder_heads;
  }
  for (std::size_t h : {4, 2}) {
    if (dd % h == 0) return h;
  }
  return 1;
}

MaskSplit sample_mask(SeededRng& rng, std::size_t n, double ratio) {
  if (n < 2) throw ArgumentError("sample_mask: need at least two patches");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ArgumentError("sample_mask: ratio must be in (0, 1)");
  const auto masked = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  if (masked == 0 || masked == n) {
    throw ArgumentError("sample_mask: ratio " + std::to_string(ratio) + " leaves no " +
                        (masked == 0 ? "masked" : "visible") + " patch out of " + std::to_string(n));
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  MaskSplit split;
  split.masked.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(masked));
  split.visible.assign(perm.begin() + static_cast<std::ptrdiff_t>(masked), perm.end());
  std::sort(split.masked.begin(), split.masked.end());
  std::sort(split.visible.begin(), split.visible.end());
  return split;
}

void add_mae_decoder(VisionTransformer& model, const MaeConfig& cfg, const SeededRng& rng) {
  ParamRegistry& reg = model.registry();
  if (has_mae_decoder(reg)) throw StateError("model already has an MAE decoder");
  const ViTConfig& vit = model.config();
  const std::size_t dd = cfg.resolved_dim(vit);
  cfg.resolved_heads(vit);
  const ParamGroup g = ParamGroup::Head;
  register_linear(reg, linear_names(dec("embed")), vit.embed_dim, dd, g, rng);
  reg.add(dec("mask_token"), init_trunc_normal({1, 1, dd}, rng, dec("mask_token")), g);
  reg.add(dec("pos_embed"), init_trunc_normal({1, vit.num_patches() + 1, dd}, rng, dec("pos_embed")), g);
  for (std::size_t i = 0; i < cfg.decoder_depth; ++i) {
    register_block(reg, dec("blocks." + std::to_string(i)), dd, dd * vit.mlp_ratio, g, rng);
  }
  register_norm(reg, linear_names(dec("norm")), dd, g);
  register_linear(reg, linear_names(dec("pred")), dd, vit.patch_dim(), g, rng);
}

bool has_mae_decoder(const ParamRegistry& params) { return params.contains(dec("mask_token")); }

Tensor mae_decode(const VisionTransformer& model, const MaeConfig& cfg, const Tensor& encoded,
                  const std::vector<MaskSplit>& masks) {
  const ParamRegistry& reg = model.registry();
  if (!has_mae_decoder(reg)) throw StateError("mae_decode: model has no MAE decoder");
  const ViTConfig& vit = model.config();
  const std::size_t n = vit.num_patches();
  const std::size_t b = encoded.dim(0);
  const std::size_t v = encoded.dim(1) - 1;
  const std::size_t dd = reg.get(dec("mask_token")).dim(-1);
  if (masks.size() != b) throw DimensionError("mae_decode: one mask per image required");

  const Tensor x = linear(reg, linear_names(dec("embed")), encoded);
  const Tensor cls = slice(x, 1, 0, 1);
  const Tensor visible = slice(x, 1, 1, v);
  const Tensor fill = expand(reg.get(dec("mask_token")), {b, n - v, dd});
  // Row k of [visible; mask tokens] belongs to patch order[k]; invert to restore grid order.
  std::vector<std::vector<std::size_t>> restore(b, std::vector<std::size_t>(n));
  for (std::size_t i = 0; i < b; ++i) {
    const MaskSplit& m = masks[i];
    if (m.visible.size() != v || m.visible.size() + m.masked.size() != n) {
      throw DimensionError("mae_decode: mask sizes do not match the encoded tokens");
    }
    for (std::size_t k = 0; k < v; ++k) restore[i][m.visible[k]] = k;
    for (std::size_t k = 0; k < m.masked.size(); ++k) restore[i][m.masked[k]] = v + k;
  }
  Tensor seq = gather_rows(concat({visible, fill}, 1), restore);
  seq = add(concat({cls, seq}, 1), reg.get(dec("pos_embed")));
  const std::size_t heads = cfg.resolved_heads(vit);
  for (std::size_t i = 0; i < cfg.decoder_depth; ++i) {
    seq = transformer_block(reg, block_names(dec("blocks." + std::to_string(i))), heads, vit.norm_eps, seq);
  }
  seq = layer_norm(seq, reg.get(dec("norm.weight")), reg.get(dec("norm.bias")), vit.norm_eps);
  return slice(linear(reg, linear_names(dec("pred")), seq), 1, 1, n);
}

Tensor mae_loss(const VisionTransformer& model, const MaeConfig& cfg, const Tensor& images, const Tensor& target_patches,
                const std::vector<MaskSplit>& masks) {
  const ViTConfig& vit = model.config();
  const std::size_t b = images.dim(0);
  if (masks.size() != b) throw DimensionError("mae_loss: one mask per image required");
  const Tensor tokens = model.add_positional(model.embed(patchify(images, vit.patch_size)));
  std::vector<std::vector<std::size_t>> keep(b);
  for (std::size_t i = 0; i < b; ++i) keep[i] = masks[i].visible;
  const Tensor encoded = model.run_blocks(model.with_class_token(gather_rows(tokens, keep)));
  const Tensor pred = mae_decode(model, cfg, encoded, masks);

  Tensor target = target_patches;
  const std::size_t n = vit.num_patches();
  const std::size_t pd = vit.patch_dim();
  if (cfg.norm_pix_targets) {
    std::vector<double> t = target.values();
    for (std::size_t r = 0; r < b * n; ++r) {
      double* row = t.data() + r * pd;
      const double mu = std::accumulate(row, row + pd, 0.0) / static_cast<double>(pd);
      double var = 0.0;
      for (std::size_t j = 0; j < pd; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<double>(pd);
      const double inv = 1.0 / std::sqrt(var + 1e-6);
      for (std::size_t j = 0; j < pd; ++j) row[j] = (row[j] - mu) * inv;
    }
    target = Tensor(target.shape(), std::move(t));
  }
  std::vector<bool> row_mask(b * n, false);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k : masks[i].masked) row_mask[i * n + k] = true;
  return mse_masked(pred, target, row_mask);
}

Tensor mae_step(const VisionTransformer& model, const Tensor& images, const MaeConfig& cfg, SeededRng& rng) {
  const std::size_t n = model.config().num_patches();
  std::vector<MaskSplit> masks;
  masks.reserve(images.dim(0));
  for (std::size_t i = 0; i < images.dim(0); ++i) masks.push_back(sample_mask(rng, n, cfg.mask_ratio));
  return mae_loss(model, cfg, images, patchify(images, model.config().patch_size), masks);
}

// ---- self-distillation ----

void DinoConfig::validate() const {
  if (!(teacher_momentum >= 0.0 && teacher_momentum < 1.0)) throw ConfigError("teacher_momentum must be in [0, 1)");
  if (!(center_momentum >= 0.0 && center_momentum < 1.0)) throw ConfigError("center_momentum must be in [0, 1)");
  if (!(teacher_temp > 0.0) || !(student_temp > 0.0)) throw ConfigError("DINO temperatures must be positive");
  if (num_global_views < 2) throw ConfigError("DINO needs at least two global views");
  if (head_output_dim < 2 || head_hidden == 0) throw ConfigError("DINO head dimensions must be positive");
  if (!(global_scale_min > 0.0 && global_scale_min <= 1.0)) throw ConfigError("global_scale_min must be in (0, 1]");
  if (!(local_scale_min > 0.0 && local_scale_min <= local_scale_max && local_scale_max <= 1.0)) {
    throw ConfigError("local crop scales must satisfy 0 < min <= max <= 1");
  }
}

void add_dino_head(VisionTransformer& model, const DinoConfig& cfg, ParamGroup group, const SeededRng& rng) {
  ParamRegistry& reg = model.registry();
  if (reg.contains(kHead + "fc1.weight")) throw StateError("model already has a DINO head");
  register_linear(reg, linear_names(kHead + "fc1"), model.config().embed_dim, cfg.head_hidden, group, rng);
  register_linear(reg, linear_names(kHead + "fc2"), cfg.head_hidden, cfg.head_output_dim, group, rng);
}

Tensor dino_forward(const VisionTransformer& model, const Tensor& images) {
  const ParamRegistry& reg = model.registry();
  const Tensor h = gelu(linear(reg, linear_names(kHead + "fc1"), model.pooled(images)));
  return linear(reg, linear_names(kHead + "fc2"), h);
}

void dino_teacher_update(std::span<double> teacher, std::span<const double> student, double momentum) {
  if (teacher.size() != student.size()) throw StateError("dino_teacher_update: size mismatch");
  for (std::size_t i = 0; i < teacher.size(); ++i) teacher[i] = momentum * teacher[i] + (1.0 - momentum) * student[i];
}

void dino_teacher_update(ParamRegistry& teacher, const ParamRegistry& student, double momentum) {
  if (teacher.size() != student.size()) {
    throw StateError("dino_teacher_update: teacher has " + std::to_string(teacher.size()) + " parameters, student " +
                     std::to_string(student.size()));
  }
  for (std::size_t i = 0; i < student.size(); ++i) {
    const Param& s = student.params()[i];
    const Param& t = teacher.params()[i];
    if (s.name != t.name || s.tensor.shape() != t.tensor.shape()) {
      throw StateError("dino_teacher_update: structure mismatch at '" + s.name + "' / '" + t.name + "'");
    }
    if (!s.trainable) continue;
    if (t.tensor.shares_storage(s.tensor)) throw StateError("dino_teacher_update: '" + s.name + "' is shared");
    Tensor handle = t.tensor;
    dino_teacher_update(handle.mutable_data(), s.tensor.data(), momentum);
  }
}

std::vector<double> dino_center_update(const std::vector<double>& center, const std::vector<Tensor>& teacher_outputs,
                                       double momentum) {
  const std::size_t k = center.size();
  std::vector<double> batch_mean(k, 0.0);
  std::size_t rows = 0;
  for (const Tensor& t : teacher_outputs) {
    if (t.dim(-1) != k) throw DimensionError("dino_center_update: output width differs from center length");
    const std::size_t r = t.numel() / k;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < k; ++j) batch_mean[j] += t[i * k + j];
    rows += r;
  }
  if (rows == 0) return center;
  std::vector<double> out(k);
  for (std::size_t j = 0; j < k; ++j) {
    out[j] = momentum * center[j] + (1.0 - momentum) * (batch_mean[j] / static_cast<double>(rows));
  }
  return out;
}

Tensor dino_loss(const std::vector<Tensor>& student_outputs, const std::vector<Tensor>& teacher_outputs,
                 const std::vector<double>& center, const DinoConfig& cfg) {
  if (!(cfg.teacher_temp > 0.0) || !(cfg.student_temp > 0.0)) throw ArgumentError("dino_loss: temperatures must be positive");
  if (teacher_outputs.size() < 2) throw ArgumentError("dino_loss: needs at least two global views");
  if (student_outputs.size() < teacher_outputs.size()) throw ArgumentError("dino_loss: fewer student than teacher views");
  std::vector<Tensor> teacher_probs;
  for (const Tensor& t : teacher_outputs) {
    const std::size_t k = t.dim(-1);
    if (center.size() != k) throw DimensionError("dino_loss: center length differs from output width");
    std::vector<double> p(t.numel());
    for (std::size_t r = 0; r < t.numel() / k; ++r) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < k; ++j) {
        p[r * k + j] = (t[r * k + j] - center[j]) / cfg.teacher_temp;
        mx = std::max(mx, p[r * k + j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < k; ++j) z += (p[r * k + j] = std::exp(p[r * k + j] - mx));
      for (std::size_t j = 0; j < k; ++j) p[r * k + j] /= z;
    }
    teacher_probs.emplace_back(t.shape(), std::move(p));
  }
  Tensor total;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < teacher_probs.size(); ++i)
    for (std::size_t j = 0; j < student_outputs.size(); ++j) {
      if (i == j) continue;
      const Tensor term = soft_cross_entropy(teacher_probs[i], student_outputs[j], cfg.student_temp);
      total = pairs == 0 ? term : add(total, term);
      ++pairs;
    }
  return scale(total, 1.0 / static_cast<double>(pairs));
}

// ---- augmentation ----

std::string_view policy_name(AugmentPolicy policy) {
  switch (policy) {
    case AugmentPolicy::None: return "none";
    case AugmentPolicy::DinoGlobal: return "dino_global";
    case AugmentPolicy::DinoLocal: return "dino_local";
    case AugmentPolicy::FinetuneLight: return "finetune_light";
  }
  return "?";
}

AugmentPolicy parse_policy(std::string_view text) {
  for (auto p : {AugmentPolicy::None, AugmentPolicy::DinoGlobal, AugmentPolicy::DinoLocal, AugmentPolicy::FinetuneLight}) {
    if (policy_name(p) == text) return p;
  }
  throw ConfigError("unknown augmentation policy '" + std::string(text) + "'");
}

AugmentConfig AugmentConfig::for_policy(AugmentPolicy policy, std::size_t image_size, const DinoConfig& dino) {
  AugmentConfig c;
  c.out_size = image_size;
  switch (policy) {
    case AugmentPolicy::None:
      break;
    case AugmentPolicy::DinoGlobal:
      c.scale_min = dino.global_scale_min;
      c.scale_max = 1.0;
      break;
    case AugmentPolicy::DinoLocal:
      c.out_size = dino.local_size ? dino.local_size : image_size / 2;
      c.scale_min = dino.local_scale_min;
      c.scale_max = dino.local_scale_max;
      c.solarize_prob = 0.0;
      break;
    case AugmentPolicy::FinetuneLight:
      c.scale_min = 0.8;
      c.jitter_prob = 0.0;
      c.blur_prob = 0.0;
      c.solarize_prob = 0.0;
      break;
  }
  return c;
}

Tensor solarize(const Tensor& image, double threshold) {
  std::vector<double> v = image.values();
  for (double& x : v) {
    if (x >= threshold) x = 1.0 - x;
  }
  return Tensor(image.shape(), std::move(v));
}

Tensor hflip(const Tensor& image) {
  if (image.rank() != 3) throw DimensionError("hflip expects [C,H,W]");
  const std::size_t w = image.dim(2);
  std::vector<double> v(image.numel());
  const auto& src = image.values();
  for (std::size_t r = 0; r < image.numel() / w; ++r)
    for (std::size_t x = 0; x < w; ++x) v[r * w + x] = src[r * w + (w - 1 - x)];
  return Tensor(image.shape(), std::move(v));
}

Tensor color_jitter(const Tensor& image, double brightness, double contrast) {
  std::vector<double> v = image.values();
  double mean = 0.0;
  for (double& x : v) mean += (x *= brightness);
  mean /= static_cast<double>(v.size());
  for (double& x : v) x = std::clamp(mean + contrast * (x - mean), 0.0, 1.0);
  return Tensor(image.shape(), std::move(v));
}

Tensor gaussian_blur(const Tensor& image, double sigma) {
  if (image.rank() != 3) throw DimensionError("gaussian_blur expects [C,H,W]");
  if (!(sigma > 0.0)) return image.clone();
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = w;
    ksum += w;
  }
  for (double& w : kernel) w /= ksum;
  const std::size_t c = image.dim(0);
  const auto h = static_cast<std::ptrdiff_t>(image.dim(1));
  const auto w = static_cast<std::ptrdiff_t>(image.dim(2));
  const auto& src = image.values();
  std::vector<double> tmp(src.size());
  std::vector<double> out(src.size());
  auto clampi = [](std::ptrdiff_t i, std::ptrdiff_t n) { return std::clamp<std::ptrdiff_t>(i, 0, n - 1); };
  for (std::size_t ch = 0; ch < c; ++ch) {
    const std::size_t base = ch * static_cast<std::size_t>(h * w);
    for (std::ptrdiff_t y = 0; y < h; ++y)
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
          acc += kernel[static_cast<std::size_t>(k + radius)] * src[base + static_cast<std::size_t>(y * w + clampi(x + k, w))];
        }
        tmp[base + static_cast<std::size_t>(y * w + x)] = acc;
      }
    for (std::ptrdiff_t y = 0; y < h; ++y)
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
          acc += kernel[static_cast<std::size_t>(k + radius)] * tmp[base + static_cast<std::size_t>(clampi(y + k, h) * w + x)];
        }
        out[base + static_cast<std::size_t>(y * w + x)] = acc;
      }
  }
  return Tensor(image.shape(), std::move(out));
}

Tensor random_resized_crop(SeededRng& rng, const Tensor& image, double scale_min, double scale_max, std::size_t out) {
  const auto h = static_cast<double>(image.dim(1));
  const auto w = static_cast<double>(image.dim(2));
  const double area = rng.uniform(scale_min, scale_max) * h * w;
  const double log_ratio = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
  const double ratio = std::exp(log_ratio);
  const double ch = std::min(h, std::sqrt(area / ratio));
  const double cw = std::min(w, std::sqrt(area * ratio));
  const double top = rng.uniform(0.0, h - ch);
  const double left = rng.uniform(0.0, w - cw);
  return crop_resize(image, top, left, ch, cw, out);
}

Tensor augment(SeededRng& rng, const Tensor& image, AugmentPolicy policy) {
  return augment(rng, image, AugmentConfig::for_policy(policy, image.dim(-1)), policy);
}

Tensor augment(SeededRng& rng, const Tensor& image, const AugmentConfig& cfg, AugmentPolicy policy) {
  if (policy == AugmentPolicy::None) return image;
  const std::size_t out = cfg.out_size ? cfg.out_size : image.dim(-1);
  Tensor x = random_resized_crop(rng, image, cfg.scale_min, cfg.scale_max, out);
  if (rng.bernoulli(cfg.flip_prob)) x = hflip(x);
  if (rng.bernoulli(cfg.jitter_prob)) {
    const double b = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness);
    const double c = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast);
    x = color_jitter(x, b, c);
  }
  if (rng.bernoulli(cfg.blur_prob)) x = gaussian_blur(x, rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max));
  if (rng.bernoulli(cfg.solarize_prob)) x = solarize(x, cfg.solarize_threshold);
  return x;
}

ViewBatch make_views(std::vector<SeededRng>& sample_rngs, const std::vector<Tensor>& images, const DinoConfig& cfg) {
  if (sample_rngs.size() != images.size()) throw ArgumentError("make_views: one rng per image required");
  const std::size_t size = images.front().dim(-1);
  const AugmentConfig global = AugmentConfig::for_policy(AugmentPolicy::DinoGlobal, size, cfg);
  const AugmentConfig local = AugmentConfig::for_policy(AugmentPolicy::DinoLocal, size, cfg);
  ViewBatch views;
  auto build = [&](const AugmentConfig& ac, AugmentPolicy policy) {
    std::vector<Tensor> crops;
    crops.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) crops.push_back(augment(sample_rngs[i], images[i], ac, policy));
    return stack_images(crops);
  };
  for (std::size_t v = 0; v < cfg.num_global_views; ++v) views.global_views.push_back(build(global, AugmentPolicy::DinoGlobal));
  for (std::size_t v = 0; v < cfg.num_local_views; ++v) views.local_views.push_back(build(local, AugmentPolicy::DinoLocal));
  return views;
}

DinoStepResult dino_step(const VisionTransformer& student, const VisionTransformer& teacher, const ViewBatch& views,
                         const std::vector<double>& center, const DinoConfig& cfg) {
  DinoStepResult result;
  {
    NoGradGuard guard;
    for (const Tensor& g : views.global_views) result.teacher_outputs.push_back(dino_forward(teacher, g).detach());
  }
  std::vector<Tensor> student_outputs;
  for (const Tensor& g : views.global_views) student_outputs.push_back(dino_forward(student, g));
  for (const Tensor& l : views.local_views) student_outputs.push_back(dino_forward(student, l));
  result.loss = dino_loss(student_outputs, result.teacher_outputs, center, cfg);
  return result;
}

}  // namespace tpp
