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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tpp/rng.hpp"
#include "tpp/tensor.hpp"

namespace tpp {

enum class Task { Classification, Segmentation };

struct Sample {
  Tensor image;                 // [C,H,W], values in [0,1]
  std::size_t label = 0;        // classification
  std::optional<Tensor> mask;   // segmentation, [H,W] of class indices
  std::string id;
};

struct Dataset {
  Task task = Task::Classification;
  std::size_t num_classes = 2;
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::string> class_names;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  /// Indices of samples grouped per stratum (per class; one stratum for segmentation).
  std::vector<std::vector<std::size_t>> strata() const;
  Dataset with_samples(std::vector<Sample> picked) const;
};

struct DatasetSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

// ---- file formats ----

/// Binary PGM (P5, 1 channel) or PPM (P6, 3 channels) as [C,H,W] scaled by 1/maxval.
Tensor read_pnm(const std::filesystem::path& path);
/// Same file read without scaling (mask files store class indices).
Tensor read_pnm_raw(const std::filesystem::path& path);
/// Writes [1,H,W] as P5 or [3,H,W] as P6 with maxval 255 (values clamped to [0,1]).
void write_pnm(const std::filesystem::path& path, const Tensor& image);
/// Raw tensor file: "TPPT", u32 rank, u64 dims, little-endian float64 payload.
Tensor read_tppt(const std::filesystem::path& path);
void write_tppt(const std::filesystem::path& path, const Tensor& tensor);

/// Corner-aligned bilinear resize of [C,H,W]: source = dst * (in - 1) / (out - 1).
Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w);
/// Corner-aligned nearest-neighbour resize for [H,W] label maps.
Tensor resize_nearest(const Tensor& mask, std::size_t out_h, std::size_t out_w);
/// Crop of [C,H,W] (top, left, height, width), bilinearly resized to out x out.
Tensor crop_resize(const Tensor& image, double top, double left, double height, double width, std::size_t out);

// ---- folder datasets ----

enum class ImageFormat { Auto, Pnm, Tppt };

struct LoadOptions {
  Task task = Task::Classification;
  ImageFormat format = ImageFormat::Auto;
  std::size_t image_size = 0;   // 0 keeps the native size (all files must agree)
  std::size_t channels = 0;     // 0 keeps the file's channel count
  std::size_t num_classes = 0;  // segmentation only; 0 infers max(mask) + 1
};

/// Loads one split directory: `<class>/<file>` for classification,
/// `images/<file>` + `masks/<file>` (matched by stem) for segmentation.
/// Samples are ordered by id; classes by sorted directory name.
Dataset load_folder(const std::filesystem::path& split_dir, const LoadOptions& options);

// ---- synthetic tasks ----

struct SyntheticTaskSpec {
  enum class Kind { TexturedShapesCls, BlobSeg };
  Kind kind = Kind::TexturedShapesCls;
  std::size_t num_classes = 4;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  double noise = 0.1;
  // Amplitude of the class-specific grating (classification) or blob contrast (segmentation).
  double separation = 0.3;
  // Amplitude of class-independent distractor shapes.
  double distractor = 0.2;
  std::size_t max_blobs = 2;
  std::size_t train_count = 256;
  std::size_t val_count = 128;
  std::size_t test_count = 128;
};

struct Disc {
  double cy = 0.0;
  double cx = 0.0;
  double radius = 0.0;
};

/// Pixels whose centres fall inside the disc, as a [H,W] 0/1 tensor.
Tensor rasterize_disc(std::size_t height, std::size_t width, const Disc& disc);

struct GeneratedSample {
  Sample sample;
  std::vector<Disc> discs;  // BlobSeg ground-truth geometry
};

GeneratedSample generate_sample(const SyntheticTaskSpec& spec, std::size_t label, SeededRng& rng);
/// Generates train/val/test with independent derived streams; fully determined by the seed.
DatasetSplits generate_synthetic(const SyntheticTaskSpec& spec, const SeededRng& rng);

// ---- splits & subsets ----

struct SplitSpec {
  double val_fraction = 0.2;
  double test_fraction = 0.0;
  std::uint64_t seed = 0;
};

/// Stratified, deterministic, disjoint split of one dataset.
DatasetSplits split_dataset(const Dataset& data, const SplitSpec& spec);

/// Per-stratum ceil(ratio * n) samples from a seeded permutation; subsets for
/// smaller ratios are contained in those for larger ratios.
Dataset subset(const Dataset& data, double ratio, std::uint64_t seed);

/// Stacks the chosen sample images into [B,C,H,W].
Tensor stack_images(const std::vector<Tensor>& images);

}  // namespace tpp
