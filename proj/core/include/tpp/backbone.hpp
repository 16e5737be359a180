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
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tpp/rng.hpp"
#include "tpp/tensor.hpp"

namespace tpp {

/// Partition of model parameters: pre-trained backbone, PEFT target parameters,
/// and task heads.
enum class ParamGroup : std::uint8_t { Backbone = 0, Target = 1, Head = 2 };

inline constexpr ParamGroup kAllGroups[] = {ParamGroup::Backbone, ParamGroup::Target, ParamGroup::Head};

std::string_view group_name(ParamGroup group);
std::optional<ParamGroup> parse_group(std::string_view text);

struct Param {
  std::string name;
  Tensor tensor;
  ParamGroup group = ParamGroup::Backbone;
  // Mirrors tensor.requires_grad(); change it only through ParamRegistry.
  bool trainable = true;
};

/// Ordered, uniquely named parameter set. Parameters keep insertion order so
/// that counts, checkpoints and optimizer state are reproducible.
class ParamRegistry {
 public:
  Param& add(std::string name, Tensor tensor, ParamGroup group, bool trainable = true);

  bool contains(std::string_view name) const { return index_.find(name) != index_.end(); }
  const Param& param(std::string_view name) const;
  const Tensor& get(std::string_view name) const { return param(name).tensor; }
  std::span<const Param> params() const { return params_; }
  std::size_t size() const { return params_.size(); }

  void set_trainable(std::string_view name, bool trainable);
  void set_group(std::string_view name, ParamGroup group);
  /// Sets trainable for every parameter of `group`.
  void set_group_trainable(ParamGroup group, bool trainable);
  /// Removes every parameter whose name starts with `prefix`; returns how many.
  std::size_t remove_prefix(std::string_view prefix);

  std::size_t count(ParamGroup group) const;
  std::size_t total_count() const;
  std::size_t trainable_count() const;
  /// Trainable scalars over all scalars, in percent.
  double trainable_ratio() const;
  bool has_group(ParamGroup group) const;

  void zero_grad();
  void drop_grads();

  /// Copy in which every trainable tensor is deep-copied and detached
  /// (requires_grad off, marked non-trainable); frozen tensors stay shared.
  ParamRegistry detached_copy() const;

 private:
  Param& mutable_param(std::string_view name);

  std::vector<Param> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

std::size_t count_params(const ParamRegistry& registry, ParamGroup group);
double trainable_ratio(const ParamRegistry& registry);

/// Token fed to the heads: the class token, or the mean of the patch tokens.
enum class Pooling { ClassToken, MeanPatch };

std::string_view pooling_name(Pooling pooling);
Pooling parse_pooling(std::string_view text);

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_channels = 3;
  double norm_eps = 1e-6;
  Pooling pooling = Pooling::ClassToken;

  void validate() const;
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return num_channels * patch_size * patch_size; }
  std::size_t mlp_hidden() const { return embed_dim * mlp_ratio; }
};

struct HeadSpec {
  enum class Kind { Classification, Segmentation };
  Kind kind = Kind::Classification;
  std::size_t num_classes = 2;

  static HeadSpec classification(std::size_t classes) { return {Kind::Classification, classes}; }
  static HeadSpec segmentation(std::size_t classes) { return {Kind::Segmentation, classes}; }
};

/// [C,H,W] -> [N, C*p*p] or [B,C,H,W] -> [B, N, C*p*p]; patches in row-major
/// grid order, each patch laid out channel-major.
Tensor patchify(const Tensor& image, std::size_t patch_size);
/// Inverse of patchify for [N, C*p*p] or [B, N, C*p*p].
Tensor unpatchify(const Tensor& patches, std::size_t channels, std::size_t height, std::size_t width,
                  std::size_t patch_size);

/// Places where a PEFT mechanism can intervene inside a transformer block.
enum class Site : std::uint8_t { Norm1, Query, Key, Value, Proj, Norm2, Fc1, Fc2 };
inline constexpr Site kAllSites[] = {Site::Norm1, Site::Query, Site::Key,  Site::Value,
                                     Site::Proj,  Site::Norm2, Site::Fc1, Site::Fc2};
std::string_view site_name(Site site);

/// Interception points used by PEFT mechanisms. Parameters are looked up in the
/// registry passed to every call, so a hook can be shared by a model and its
/// detached teacher copy. Default implementations are the identity.
class BlockHook {
 public:
  virtual ~BlockHook() = default;
  virtual std::string_view mechanism() const = 0;

  virtual Tensor on_block_input(const ParamRegistry& params, std::size_t block, const Tensor& seq) const;
  virtual Tensor on_sublayer(const ParamRegistry& params, std::size_t block, Site site, const Tensor& input,
                             const Tensor& output) const;
  /// mlp_input is the normalized block input fed to the MLP; mlp_output its result.
  virtual Tensor on_mlp(const ParamRegistry& params, std::size_t block, const Tensor& mlp_input,
                        const Tensor& mlp_output) const;
  virtual Tensor on_blocks_end(const ParamRegistry& params, const Tensor& seq) const;
};

struct LinearNames {
  std::string weight;
  std::string bias;
};

struct BlockNames {
  LinearNames norm1, query, key, value, proj, norm2, fc1, fc2;
};

LinearNames linear_names(const std::string& prefix);
/// Weight [in,out] from a truncated normal (std 0.02), zero bias.
void register_linear(ParamRegistry& params, const LinearNames& names, std::size_t in, std::size_t out,
                     ParamGroup group, const SeededRng& rng);
/// Unit scale, zero shift.
void register_norm(ParamRegistry& params, const LinearNames& names, std::size_t dim, ParamGroup group);
/// Truncated normal (std 0.02) tensor drawn from rng.derive(name).
Tensor init_trunc_normal(Shape shape, const SeededRng& rng, std::string_view name);

/// x @ W + b with W stored as [in, out].
Tensor linear(const ParamRegistry& params, const LinearNames& names, const Tensor& x);

/// Parameter names of the block registered under `prefix`.
BlockNames block_names(const std::string& prefix);

/// Registers one pre-norm block under `prefix` (e.g. "blocks.0").
BlockNames register_block(ParamRegistry& params, const std::string& prefix, std::size_t dim, std::size_t hidden,
                          ParamGroup group, const SeededRng& rng);

/// LN -> MHSA -> residual, LN -> MLP -> residual. `hook` may be null.
Tensor transformer_block(const ParamRegistry& params, const BlockNames& names, std::size_t num_heads, double eps,
                         const Tensor& x, const BlockHook* hook = nullptr, std::size_t block_index = 0);

/// Bilinear (corner-aligned) resampling matrix [out*out, in*in] for square grids.
Tensor grid_resample_matrix(std::size_t in_grid, std::size_t out_grid);

/// Desk-scale Vision Transformer with a class token and learnable positional
/// embeddings. Backbone parameters are registered on construction; heads and
/// PEFT parameters join the same registry later.
class VisionTransformer {
 public:
  VisionTransformer(ViTConfig config, const SeededRng& init_rng);

  const ViTConfig& config() const { return config_; }
  ParamRegistry& registry() { return registry_; }
  const ParamRegistry& registry() const { return registry_; }

  /// Installs a PEFT hook. A second call throws StateError.
  void set_hook(std::shared_ptr<const BlockHook> hook);
  const BlockHook* hook() const { return hook_.get(); }
  const std::vector<BlockNames>& block_names() const { return blocks_; }

  /// Adds a classification head ("head.*") or segmentation decoder ("seg_decoder.*").
  void add_head(const HeadSpec& spec, const SeededRng& init_rng);
  const std::optional<HeadSpec>& head() const { return head_; }
  void remove_head();

  /// [B,N,C*p*p] -> [B,N,d]
  Tensor embed(const Tensor& patches) const;
  /// Adds patch positional embeddings; a square token grid of another size gets
  /// resampled embeddings.
  Tensor add_positional(const Tensor& tokens) const;
  /// Prepends class token (+ its positional embedding).
  Tensor with_class_token(const Tensor& tokens) const;
  /// Hooked transformer blocks followed by the final norm.
  Tensor run_blocks(const Tensor& seq) const;

  /// tokens [B,N,d] (embedded patches) -> [B,N+1,d]
  Tensor forward_features(const Tensor& tokens) const;
  /// images [B,C,H,W] -> features [B,N'+1,d]; smaller square images are allowed.
  Tensor encode_images(const Tensor& images) const;
  /// Pooled representation [B,d]: the class token, or the patch-token mean.
  Tensor pooled(const Tensor& images) const;
  /// [B,K] logits through the classification head.
  Tensor classify(const Tensor& images) const;
  /// [B,K,H,W] logits through the segmentation decoder.
  Tensor segment(const Tensor& images) const;

  /// Teacher copy: trainable tensors deep-copied and detached, frozen ones shared,
  /// hook shared.
  VisionTransformer detached_copy() const;

 private:
  VisionTransformer() = default;

  ViTConfig config_;
  ParamRegistry registry_;
  std::vector<BlockNames> blocks_;
  std::shared_ptr<const BlockHook> hook_;
  std::optional<HeadSpec> head_;
};

struct SegDecoderSpec {
  std::size_t num_classes = 2;
  std::size_t patch_size = 8;
  std::size_t image_size = 32;
};

/// Projects patch tokens ([B,N+1,d], class token first) to classes*p*p logits and
/// reassembles them into [B,classes,H,W]. Weights are "seg_decoder.weight/bias".
Tensor seg_decoder_forward(const ParamRegistry& params, const Tensor& features, const SegDecoderSpec& spec);

}  // namespace tpp
