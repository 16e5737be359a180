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
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tpp/backbone.hpp"
#include "tpp/rng.hpp"
#include "tpp/tensor.hpp"

namespace tpp {

// ---- masked reconstruction ----

struct MaeConfig {
  double mask_ratio = 0.75;
  std::size_t decoder_dim = 0;    // 0: embed_dim / 2
  std::size_t decoder_depth = 1;
  std::size_t decoder_heads = 0;  // 0: largest of {4, 2, 1} dividing decoder_dim
  bool norm_pix_targets = false;

  std::size_t resolved_dim(const ViTConfig& vit) const;
  std::size_t resolved_heads(const ViTConfig& vit) const;
};

struct MaskSplit {
  std::vector<std::size_t> visible;  // ascending
  std::vector<std::size_t> masked;   // ascending
};

/// Random permutation of 0..n-1 split at round(ratio * n) masked indices.
MaskSplit sample_mask(SeededRng& rng, std::size_t n, double ratio);

inline constexpr std::string_view kMaeDecoderPrefix = "mae_decoder.";

/// Registers the lightweight decoder as "mae_decoder.*" (Head group) in the model registry.
void add_mae_decoder(VisionTransformer& model, const MaeConfig& cfg, const SeededRng& rng);
bool has_mae_decoder(const ParamRegistry& params);

/// Encoded visible tokens [B,1+V,d] -> reconstructed patches [B,N,C*p*p].
Tensor mae_decode(const VisionTransformer& model, const MaeConfig& cfg, const Tensor& encoded,
                  const std::vector<MaskSplit>& masks);

/// MSE over masked patches only. `target_patches` is [B,N,C*p*p]; visible rows never
/// reach the loss.
Tensor mae_loss(const VisionTransformer& model, const MaeConfig& cfg, const Tensor& images, const Tensor& target_patches,
                const std::vector<MaskSplit>& masks);

/// Draws one mask per image from `rng` and returns the reconstruction loss.
Tensor mae_step(const VisionTransformer& model, const Tensor& images, const MaeConfig& cfg, SeededRng& rng);

// ---- self-distillation ----

struct DinoConfig {
  double teacher_momentum = 0.996;
  double center_momentum = 0.9;
  double teacher_temp = 0.04;
  double student_temp = 0.1;
  std::size_t head_hidden = 128;
  std::size_t head_output_dim = 256;
  std::size_t num_global_views = 2;
  std::size_t num_local_views = 2;
  std::size_t local_size = 0;  // 0: half the image size
  double global_scale_min = 0.5;
  double local_scale_min = 0.05;
  double local_scale_max = 0.5;

  void validate() const;
};

inline constexpr std::string_view kDinoHeadPrefix = "dino_head.";

/// Projection head "dino_head.*": d -> hidden -> K with GELU. Joins `group`.
void add_dino_head(VisionTransformer& model, const DinoConfig& cfg, ParamGroup group, const SeededRng& rng);
/// Class-token features through the projection head: images -> [B,K].
Tensor dino_forward(const VisionTransformer& model, const Tensor& images);

/// teacher <- m * teacher + (1 - m) * student for every parameter the student trains.
/// Throws StateError when names or shapes differ.
void dino_teacher_update(ParamRegistry& teacher, const ParamRegistry& student, double momentum);
/// Scalar-array form of the same rule, for direct probes.
void dino_teacher_update(std::span<double> teacher, std::span<const double> student, double momentum);

/// center <- c * center + (1 - c) * batch mean of the teacher outputs (rows of every tensor).
std::vector<double> dino_center_update(const std::vector<double>& center, const std::vector<Tensor>& teacher_outputs,
                                       double momentum);

/// Mean over (teacher global view i, student view j != i) of
/// CE(softmax((t_i - center) / tau_t), softmax(s_j / tau_s)). Teacher side is constant.
Tensor dino_loss(const std::vector<Tensor>& student_outputs, const std::vector<Tensor>& teacher_outputs,
                 const std::vector<double>& center, const DinoConfig& cfg);

// ---- augmentation ----

enum class AugmentPolicy { None, DinoGlobal, DinoLocal, FinetuneLight };

std::string_view policy_name(AugmentPolicy policy);
AugmentPolicy parse_policy(std::string_view text);

struct AugmentConfig {
  std::size_t out_size = 0;  // 0: keep input size
  double scale_min = 0.5;
  double scale_max = 1.0;
  double flip_prob = 0.5;
  double jitter_prob = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double blur_prob = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;
  double solarize_prob = 0.2;
  double solarize_threshold = 0.5;

  static AugmentConfig for_policy(AugmentPolicy policy, std::size_t image_size, const DinoConfig& dino = {});
};

/// Pixels at or above the threshold become 1 - v.
Tensor solarize(const Tensor& image, double threshold);
Tensor hflip(const Tensor& image);
/// v' = clamp(mean + contrast * (brightness * v - mean)) with mean over the image.
Tensor color_jitter(const Tensor& image, double brightness, double contrast);
Tensor gaussian_blur(const Tensor& image, double sigma);
/// Crop covering a uniform fraction in [scale_min, scale_max] of the area, aspect 3/4..4/3,
/// resized to out x out.
Tensor random_resized_crop(SeededRng& rng, const Tensor& image, double scale_min, double scale_max, std::size_t out);

Tensor augment(SeededRng& rng, const Tensor& image, AugmentPolicy policy);
Tensor augment(SeededRng& rng, const Tensor& image, const AugmentConfig& cfg, AugmentPolicy policy);

struct ViewBatch {
  std::vector<Tensor> global_views;  // each [B,C,H,W]
  std::vector<Tensor> local_views;   // each [B,C,h,w]
};

/// Multi-crop views of every image; image i uses sample_rngs[i].
ViewBatch make_views(std::vector<SeededRng>& sample_rngs, const std::vector<Tensor>& images, const DinoConfig& cfg);

struct DinoStepResult {
  Tensor loss;
  std::vector<Tensor> teacher_outputs;
};

/// Student forward on all views, teacher forward (no tape) on the global views.
DinoStepResult dino_step(const VisionTransformer& student, const VisionTransformer& teacher, const ViewBatch& views,
                         const std::vector<double>& center, const DinoConfig& cfg);

}  // namespace tpp
