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
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tpp {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;
  // Index into the producing tape, or -1 for leaves.
  std::int64_t node = -1;
  std::uint64_t tape_epoch = 0;
};

/// Dense row-major float64 array with reverse-mode gradient support.
///
/// Copies share storage (handle semantics); use clone() for a deep copy. Leaves
/// with requires_grad receive accumulated gradients from backward(); results of
/// operations on the tape hold a node handle instead and never keep gradients.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double value) { return Tensor(Shape{1}, value); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  /// Size of one axis; negative axes count from the back.
  std::size_t dim(std::int64_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// In-place access for optimizers and initializers; bypasses the tape.
  std::span<double> mutable_data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }
  double item() const;
  double operator[](std::size_t flat) const { return impl_->data[flat]; }

  bool requires_grad() const { return impl_->requires_grad; }
  /// Only valid on leaves. Turning it off drops any gradient buffer.
  void set_requires_grad(bool flag);
  bool is_leaf() const { return impl_->node < 0; }
  bool has_grad() const { return impl_->grad.has_value(); }
  /// Gradient buffer; throws StateError when absent.
  std::span<const double> grad() const;
  void zero_grad();
  void drop_grad() { impl_->grad.reset(); }

  /// Deep copy of the values as a fresh leaf without gradient tracking.
  Tensor clone() const;
  /// Same as clone(); reads as stop-gradient at call sites.
  Tensor detach() const { return clone(); }
  /// Overwrites values from a same-shaped tensor (no tape interaction).
  void assign(const Tensor& other);

  bool shares_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

enum class OpKind {
  Add, Sub, Mul, Div, Scale, Gelu, MatMul, LayerNorm, Softmax, LogSoftmax,
  Reshape, Permute, Slice, Concat, Expand, Gather, Sum, Mean,
  MseMasked, CrossEntropy, SoftCrossEntropy, Dice,
};

const char* op_name(OpKind kind);

/// Receives the output gradient and one accumulation buffer per input
/// (nullptr where the input does not need a gradient).
using BackwardFn = std::function<void(const std::vector<double>& grad_out,
                                      std::span<std::vector<double>* const> grad_in)>;

/// Append-only record of differentiable operations for the current thread.
///
/// Backward walks nodes in strictly reverse append order. clear() releases all
/// saved activations and bumps the epoch; tensors recorded before the clear can
/// no longer be backpropagated or used as differentiable inputs.
class Tape {
 public:
  static Tape& current();

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t epoch() const { return epoch_; }
  void clear();

  /// Builds the output tensor and records a node when any input requires grad
  /// and gradient recording is enabled.
  Tensor record(OpKind kind, Shape shape, std::vector<double> data,
                std::initializer_list<const Tensor*> inputs, BackwardFn fn);
  Tensor record(OpKind kind, Shape shape, std::vector<double> data,
                const std::vector<const Tensor*>& inputs, BackwardFn fn);

  void backward(const Tensor& loss);

  /// Kinds of recorded nodes in append order (for audits and tests).
  std::vector<OpKind> kinds() const;

 private:
  struct Node {
    OpKind kind;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  std::uint64_t epoch_ = 1;
};

bool grad_enabled();

/// Disables recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Populates gradients of every reachable leaf with requires_grad. Gradients
/// accumulate until zeroed. The loss must be a single-element tensor.
void backward(const Tensor& loss);

}  // namespace tpp
