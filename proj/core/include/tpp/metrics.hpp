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
#include <span>
#include <string>
#include <vector>

#include "tpp/tensor.hpp"

namespace tpp {

/// Row-wise argmax of [R,K] scores; ties go to the lowest class index.
std::vector<std::size_t> argmax_rows(const Tensor& scores);

/// Percent of predictions equal to the labels.
double accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> labels);

/// Unweighted mean over classes of 2PR/(P+R), percent. A class with no
/// predicted and no actual positives contributes 0.
double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> labels, std::size_t num_classes);

struct AucResult {
  double value = 0.0;                 // percent
  std::vector<std::size_t> skipped;   // classes absent from the labels (or with no negatives)
  std::vector<double> per_class;      // percent, NaN for skipped classes
};

/// Macro one-vs-rest AUC from the Mann-Whitney statistic with 0.5 credit per tie.
/// `scores` is row-major [n, num_classes]. With two classes only the class-1
/// column is scored, which is the standard binary AUC.
AucResult auc(std::span<const double> scores, std::span<const std::size_t> labels, std::size_t num_classes);

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w, 0) {}
  bool at(std::size_t y, std::size_t x) const { return pixels[y * width + x] != 0; }
  void set(std::size_t y, std::size_t x, bool v = true) { pixels[y * width + x] = v ? 1 : 0; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
};

/// Pixels of a label map equal to `cls`.
BinaryMask class_mask(const Tensor& label_map, std::size_t cls);

/// 2|P&G| / (|P| + |G|) in percent; 100 when both are empty.
double dice(const BinaryMask& pred, const BinaryMask& gt);

/// Foreground pixels 4-adjacent to background or to the image edge.
BinaryMask boundary(const BinaryMask& mask);

/// Exact squared Euclidean distance from every pixel to the nearest set pixel
/// (separable lower-envelope transform). +inf everywhere when `sites` is empty.
std::vector<double> squared_distance_transform(const BinaryMask& sites);

/// Linear interpolation between order statistics at rank q * (n - 1).
double percentile(std::vector<double> values, double q);

struct Hd95Result {
  double value = 0.0;       // pixels
  bool empty_mask = false;  // value is the image-diagonal sentinel
};

/// 95th percentile of the pooled boundary-to-nearest-boundary distances in both directions.
Hd95Result hd95(const BinaryMask& pred, const BinaryMask& gt);

struct EvalReport {
  std::string split;
  std::size_t sample_count = 0;
  std::map<std::string, double> metrics;
  std::map<std::string, std::vector<double>> per_class;
  std::vector<std::string> notes;

  double primary() const;
  std::string primary_name() const;
};

/// ACC, F1 and AUC of [n,K] scores against labels.
EvalReport classification_report(const Tensor& scores, std::span<const std::size_t> labels, std::size_t num_classes);

/// Mean foreground Dice and HD95 over images and classes 1..K-1 from [H,W] label maps.
EvalReport segmentation_report(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts, std::size_t num_classes);

}  // namespace tpp
