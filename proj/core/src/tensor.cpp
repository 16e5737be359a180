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

#include "tpp/tensor.hpp"

#include <sstream>

#include "tpp/error.hpp"

namespace tpp {

namespace {

thread_local bool g_grad_enabled = true;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : Tensor(Shape{1}, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<TensorImpl>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " does not match " + std::to_string(data.size()) +
                         " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

std::size_t Tensor::dim(std::int64_t axis) const {
  const auto r = static_cast<std::int64_t>(rank());
  const auto a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape()));
  return impl_->shape[static_cast<std::size_t>(a)];
}

double Tensor::item() const {
  if (numel() != 1) throw ArgumentError("item() needs a single-element tensor, got " + shape_to_string(shape()));
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw StateError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.reset();
}

std::span<const double> Tensor::grad() const {
  if (!impl_->grad) throw StateError("tensor has no gradient buffer");
  return *impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0);
}

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data); }

void Tensor::assign(const Tensor& other) {
  if (other.shape() != shape()) {
    throw DimensionError("assign: shape " + shape_to_string(other.shape()) + " into " + shape_to_string(shape()));
  }
  impl_->data = other.impl_->data;
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Scale: return "scale";
    case OpKind::Gelu: return "gelu";
    case OpKind::MatMul: return "matmul";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::Reshape: return "reshape";
    case OpKind::Permute: return "permute";
    case OpKind::Slice: return "slice";
    case OpKind::Concat: return "concat";
    case OpKind::Expand: return "expand";
    case OpKind::Gather: return "gather";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::MseMasked: return "mse_masked";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::SoftCrossEntropy: return "soft_cross_entropy";
    case OpKind::Dice: return "dice";
  }
  return "?";
}

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::clear() {
  nodes_.clear();
  nodes_.shrink_to_fit();
  ++epoch_;
}

Tensor Tape::record(OpKind kind, Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                    BackwardFn fn) {
  return record(kind, std::move(shape), std::move(data), std::vector<const Tensor*>(inputs), std::move(fn));
}

Tensor Tape::record(OpKind kind, Shape shape, std::vector<double> data, const std::vector<const Tensor*>& inputs,
                    BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  bool needs = false;
  for (const Tensor* t : inputs) {
    if (!t->requires_grad()) continue;
    if (!t->is_leaf() && t->impl()->tape_epoch != epoch_) {
      throw StateError(std::string(op_name(kind)) + ": input was produced on a cleared tape");
    }
    needs = true;
  }
  if (!needs) return out;
  Node node{kind, {}, std::move(fn)};
  node.inputs.reserve(inputs.size());
  for (const Tensor* t : inputs) node.inputs.push_back(t->impl());
  const auto& impl = out.impl();
  impl->requires_grad = true;
  impl->node = static_cast<std::int64_t>(nodes_.size());
  impl->tape_epoch = epoch_;
  nodes_.push_back(std::move(node));
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ArgumentError("backward needs a scalar loss, got " + shape_to_string(loss.shape()));
  if (!loss.requires_grad()) throw ArgumentError("backward: loss is not attached to the tape");
  const auto& limpl = loss.impl();
  if (loss.is_leaf()) {
    if (!limpl->grad) limpl->grad.emplace(1, 0.0);
    (*limpl->grad)[0] += 1.0;
    return;
  }
  if (limpl->tape_epoch != epoch_) throw StateError("backward: the tape holding this loss was cleared");

  const auto start = static_cast<std::size_t>(limpl->node);
  std::vector<std::vector<double>> grads(start + 1);
  grads[start].assign(1, 1.0);
  std::vector<std::vector<double>*> gin;
  for (std::size_t id = start + 1; id-- > 0;) {
    if (grads[id].empty()) continue;
    Node& node = nodes_[id];
    gin.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      TensorImpl* in = node.inputs[i].get();
      if (!in->requires_grad) continue;
      if (in->node >= 0) {
        auto& buf = grads[static_cast<std::size_t>(in->node)];
        if (buf.empty()) buf.assign(in->data.size(), 0.0);
        gin[i] = &buf;
      } else {
        if (!in->grad) in->grad.emplace(in->data.size(), 0.0);
        gin[i] = &*in->grad;
      }
    }
    node.fn(grads[id], gin);
    std::vector<double>().swap(grads[id]);
  }
}

std::vector<OpKind> Tape::kinds() const {
  std::vector<OpKind> out;
  out.reserve(nodes_.size());
  for (const auto& n : nodes_) out.push_back(n.kind);
  return out;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Tensor& loss) { Tape::current().backward(loss); }

}  // namespace tpp
