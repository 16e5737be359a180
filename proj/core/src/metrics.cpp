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

#include "tpp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tpp/error.hpp"

namespace tpp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ArgumentError(std::string(what) + ": " + std::to_string(a) + " predictions vs " + std::to_string(b) + " labels");
}

// One-dimensional squared distance transform of f (Felzenszwalb and Huttenlocher).
void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  const std::size_t n = f.size();
  std::vector<std::size_t> v(n);
  std::vector<double> z(n + 1);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] < kInf) {
      first = q;
      break;
    }
  }
  if (first == n) {
    std::fill(d.begin(), d.end(), kInf);
    return;
  }
  v[0] = first;
  z[0] = -kInf;
  z[1] = kInf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (f[q] == kInf) continue;
    const auto qd = static_cast<double>(q);
    double s;
    while (true) {
      const auto vk = static_cast<double>(v[k]);
      s = ((f[q] + qd * qd) - (f[v[k]] + vk * vk)) / (2.0 * qd - 2.0 * vk);
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    if (s <= z[k]) {
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      k = 0;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double dq = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace

std::vector<std::size_t> argmax_rows(const Tensor& scores) {
  if (scores.rank() != 2) throw DimensionError("argmax_rows expects [R,K], got " + shape_to_string(scores.shape()));
  const std::size_t k = scores.dim(1);
  std::vector<std::size_t> out(scores.dim(0));
  for (std::size_t r = 0; r < out.size(); ++r) {
    const double* row = scores.data().data() + r * k;
    out[r] = static_cast<std::size_t>(std::max_element(row, row + k) - row);
  }
  return out;
}

double accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> labels) {
  check_lengths(preds.size(), labels.size(), "accuracy");
  if (preds.empty()) throw ArgumentError("accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return 100.0 * static_cast<double>(hits) / static_cast<double>(preds.size());
}

double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> labels, std::size_t num_classes) {
  check_lengths(preds.size(), labels.size(), "macro_f1");
  if (num_classes < 2) throw ArgumentError("macro_f1: need at least two classes");
  std::vector<std::size_t> tp(num_classes), fp(num_classes), fn(num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= num_classes || labels[i] >= num_classes) throw ArgumentError("macro_f1: class index out of range");
    if (preds[i] == labels[i]) {
      ++tp[preds[i]];
    } else {
      ++fp[preds[i]];
      ++fn[labels[i]];
    }
  }
  double total = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    // F1 = 2TP / (2TP + FP + FN), the same quantity as 2PR/(P+R) when defined.
    const std::size_t denom = 2 * tp[c] + fp[c] + fn[c];
    if (denom > 0) total += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
  }
  return 100.0 * total / static_cast<double>(num_classes);
}

AucResult auc(std::span<const double> scores, std::span<const std::size_t> labels, std::size_t num_classes) {
  if (num_classes < 2) throw ArgumentError("auc: need at least two classes");
  const std::size_t n = labels.size();
  if (scores.size() != n * num_classes) {
    throw ArgumentError("auc: expected " + std::to_string(n * num_classes) + " scores, got " + std::to_string(scores.size()));
  }
  AucResult out;
  out.per_class.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  std::vector<std::size_t> order(n);
  double sum = 0.0;
  std::size_t used = 0;
  const std::size_t first = num_classes == 2 ? 1 : 0;
  for (std::size_t c = first; c < num_classes; ++c) {
    std::size_t pos = 0;
    for (auto l : labels) pos += l == c;
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0) {
      out.skipped.push_back(c);
      continue;
    }
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return scores[a * num_classes + c] < scores[b * num_classes + c];
    });
    // Sum of mid-ranks of the positives.
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j < n && scores[order[j] * num_classes + c] == scores[order[i] * num_classes + c]) ++j;
      const double mid = 0.5 * static_cast<double>(i + 1 + j);
      for (std::size_t k = i; k < j; ++k) {
        if (labels[order[k]] == c) rank_sum += mid;
      }
      i = j;
    }
    const auto p = static_cast<double>(pos);
    const double u = rank_sum - p * (p + 1.0) / 2.0;
    const double value = 100.0 * u / (p * static_cast<double>(neg));
    out.per_class[c] = value;
    if (num_classes == 2) out.per_class[0] = value;
    sum += value;
    ++used;
  }
  out.value = used ? sum / static_cast<double>(used) : std::numeric_limits<double>::quiet_NaN();
  return out;
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count_if(pixels.begin(), pixels.end(), [](std::uint8_t p) { return p != 0; }));
}

BinaryMask class_mask(const Tensor& label_map, std::size_t cls) {
  if (label_map.rank() != 2) throw DimensionError("class_mask expects [H,W], got " + shape_to_string(label_map.shape()));
  BinaryMask m(label_map.dim(0), label_map.dim(1));
  for (std::size_t i = 0; i < m.pixels.size(); ++i) m.pixels[i] = label_map[i] == static_cast<double>(cls);
  return m;
}

double dice(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) throw ArgumentError("dice: mask shapes differ");
  std::size_t inter = 0;
  std::size_t total = 0;
  for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
    const bool p = pred.pixels[i] != 0;
    const bool g = gt.pixels[i] != 0;
    inter += p && g;
    total += static_cast<std::size_t>(p) + static_cast<std::size_t>(g);
  }
  if (total == 0) return 100.0;
  return 100.0 * 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

BinaryMask boundary(const BinaryMask& mask) {
  BinaryMask b(mask.height, mask.width);
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == mask.height || x + 1 == mask.width;
      if (edge || !mask.at(y - 1, x) || !mask.at(y + 1, x) || !mask.at(y, x - 1) || !mask.at(y, x + 1)) b.set(y, x);
    }
  return b;
}

std::vector<double> squared_distance_transform(const BinaryMask& sites) {
  const std::size_t h = sites.height;
  const std::size_t w = sites.width;
  std::vector<double> grid(h * w);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = sites.pixels[i] ? 0.0 : kInf;
  std::vector<double> f(std::max(h, w));
  std::vector<double> d(std::max(h, w));
  f.resize(h);
  d.resize(h);
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) f[y] = grid[y * w + x];
    edt_1d(f, d);
    for (std::size_t y = 0; y < h; ++y) grid[y * w + x] = d[y];
  }
  f.resize(w);
  d.resize(w);
  for (std::size_t y = 0; y < h; ++y) {
    std::copy(grid.begin() + static_cast<std::ptrdiff_t>(y * w), grid.begin() + static_cast<std::ptrdiff_t>((y + 1) * w), f.begin());
    edt_1d(f, d);
    std::copy(d.begin(), d.end(), grid.begin() + static_cast<std::ptrdiff_t>(y * w));
  }
  return grid;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ArgumentError("percentile: no values");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

Hd95Result hd95(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) throw ArgumentError("hd95: mask shapes differ");
  if (pred.empty() || gt.empty()) {
    const auto h = static_cast<double>(pred.height);
    const auto w = static_cast<double>(pred.width);
    return {std::sqrt(h * h + w * w), true};
  }
  const BinaryMask bp = boundary(pred);
  const BinaryMask bg = boundary(gt);
  const std::vector<double> to_gt = squared_distance_transform(bg);
  const std::vector<double> to_pred = squared_distance_transform(bp);
  std::vector<double> dist;
  for (std::size_t i = 0; i < bp.pixels.size(); ++i) {
    if (bp.pixels[i]) dist.push_back(std::sqrt(to_gt[i]));
  }
  for (std::size_t i = 0; i < bg.pixels.size(); ++i) {
    if (bg.pixels[i]) dist.push_back(std::sqrt(to_pred[i]));
  }
  return {percentile(std::move(dist), 0.95), false};
}

double EvalReport::primary() const {
  const auto it = metrics.find(primary_name());
  return it == metrics.end() ? std::numeric_limits<double>::quiet_NaN() : it->second;
}

std::string EvalReport::primary_name() const { return metrics.count("dice") ? "dice" : "acc"; }

EvalReport classification_report(const Tensor& scores, std::span<const std::size_t> labels, std::size_t num_classes) {
  if (scores.rank() != 2 || scores.dim(1) != num_classes) throw DimensionError("classification_report: scores must be [n,K]");
  EvalReport r;
  r.sample_count = labels.size();
  const auto preds = argmax_rows(scores);
  r.metrics["acc"] = accuracy(preds, labels);
  r.metrics["f1"] = macro_f1(preds, labels, num_classes);
  const AucResult a = auc(scores.data(), labels, num_classes);
  r.metrics["auc"] = a.value;
  r.per_class["auc"] = a.per_class;
  for (auto c : a.skipped) r.notes.push_back("auc: class " + std::to_string(c) + " skipped (absent from labels)");
  return r;
}

EvalReport segmentation_report(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts, std::size_t num_classes) {
  if (preds.size() != gts.size()) throw ArgumentError("segmentation_report: prediction and label counts differ");
  if (num_classes < 2) throw ArgumentError("segmentation_report: need at least two classes");
  EvalReport r;
  r.sample_count = preds.size();
  std::vector<double> dice_sum(num_classes - 1, 0.0);
  std::vector<double> hd_sum(num_classes - 1, 0.0);
  std::size_t sentinels = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    for (std::size_t c = 1; c < num_classes; ++c) {
      const BinaryMask p = class_mask(preds[i], c);
      const BinaryMask g = class_mask(gts[i], c);
      dice_sum[c - 1] += dice(p, g);
      if (p.empty() && g.empty()) continue;  // nothing to measure; contributes 0
      const Hd95Result h = hd95(p, g);
      sentinels += h.empty_mask;
      hd_sum[c - 1] += h.value;
    }
  const auto n = static_cast<double>(std::max<std::size_t>(preds.size(), 1));
  double dice_mean = 0.0;
  double hd_mean = 0.0;
  for (std::size_t c = 0; c + 1 < num_classes; ++c) {
    r.per_class["dice"].push_back(dice_sum[c] / n);
    r.per_class["hd95"].push_back(hd_sum[c] / n);
    dice_mean += dice_sum[c] / n;
    hd_mean += hd_sum[c] / n;
  }
  r.metrics["dice"] = dice_mean / static_cast<double>(num_classes - 1);
  r.metrics["hd95"] = hd_mean / static_cast<double>(num_classes - 1);
  if (sentinels) r.notes.push_back("hd95: " + std::to_string(sentinels) + " empty-mask cases scored at the image diagonal");
  return r;
}

}  // namespace tpp
