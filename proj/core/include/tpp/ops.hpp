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
#include <span>
#include <vector>

#include "tpp/tensor.hpp"

namespace tpp {

/// Broadcast result shape under trailing-dimension rules; throws DimensionError.
Shape broadcast_shapes(const Shape& a, const Shape& b);

// Elementwise arithmetic with broadcasting. Division by zero yields +/-inf (or nan for 0/0).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// Exact form 0.5 * x * (1 + erf(x / sqrt(2))).
Tensor gelu(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

/// [..., m, k] @ [..., k, n] with broadcast batch dimensions.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Normalizes over the last axis with population variance.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

/// softmax(x / temperature) over the last axis, max-subtracted.
Tensor softmax(const Tensor& x, double temperature = 1.0);
Tensor log_softmax(const Tensor& x, double temperature = 1.0);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
/// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor slice(const Tensor& x, std::int64_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis);
/// Broadcasts x to `shape`; the backward pass sums over broadcast axes.
Tensor expand(const Tensor& x, const Shape& shape);
/// x: [B, N, D]; indices: B rows of K positions each -> [B, K, D].
Tensor gather_rows(const Tensor& x, const std::vector<std::vector<std::size_t>>& indices);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---- losses (all return a [1] tensor) ----

/// pred/target: [R..., D]; mask flags each of the leading rows. Mean over masked
/// rows of the per-row mean squared error. Target is a constant.
Tensor mse_masked(const Tensor& pred, const Tensor& target, const std::vector<bool>& mask);

/// logits: [R, K]; mean over rows of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

/// Mean over rows of -sum_k p_teacher[k] * log softmax(student / T)[k].
/// Teacher probabilities are read as constants (stop-gradient).
Tensor soft_cross_entropy(const Tensor& teacher_probs, const Tensor& student_logits, double student_temperature = 1.0);

/// 1 - (2 * sum(p*q) + s) / (sum(p) + sum(q) + s); targets are constant.
Tensor dice_loss(const Tensor& probs, const Tensor& targets, double smooth = 1e-5);

}  // namespace tpp
