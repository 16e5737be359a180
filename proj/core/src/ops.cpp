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

#include "tpp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <string>

#include "tpp/error.hpp"

namespace tpp {

namespace {

// Maps flat indices of a broadcast output back to an input.
class IndexMap {
 public:
  IndexMap(const Shape& in, const Shape& out) {
    const std::size_t in_numel = shape_numel(in);
    if (in == out) {
      mode_ = Mode::Same;
      return;
    }
    if (in_numel == 1) {
      mode_ = Mode::Scalar;
      return;
    }
    // Suffix broadcast: `in` (minus leading ones) equals the trailing dims of `out`.
    std::size_t lead = 0;
    while (lead < in.size() && in[lead] == 1) ++lead;
    const std::size_t tail = in.size() - lead;
    if (tail <= out.size() && std::equal(in.begin() + static_cast<std::ptrdiff_t>(lead), in.end(),
                                         out.end() - static_cast<std::ptrdiff_t>(tail))) {
      mode_ = Mode::Suffix;
      mod_ = in_numel;
      return;
    }
    mode_ = Mode::Table;
    const std::size_t r = out.size();
    std::vector<std::size_t> stride(r, 0);
    std::size_t s = 1;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const std::size_t in_axis = in.size() - 1 - i;
      const std::size_t out_axis = r - 1 - i;
      stride[out_axis] = in[in_axis] == 1 ? 0 : s;
      s *= in[in_axis];
    }
    const std::size_t n = shape_numel(out);
    table_.resize(n);
    std::vector<std::size_t> idx(r, 0);
    std::size_t offset = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
      table_[flat] = offset;
      for (std::size_t ax = r; ax-- > 0;) {
        ++idx[ax];
        offset += stride[ax];
        if (idx[ax] < out[ax]) break;
        offset -= stride[ax] * idx[ax];
        idx[ax] = 0;
      }
    }
  }

  std::size_t operator()(std::size_t i) const {
    switch (mode_) {
      case Mode::Same: return i;
      case Mode::Scalar: return 0;
      case Mode::Suffix: return i % mod_;
      case Mode::Table: return table_[i];
    }
    return i;
  }

 private:
  enum class Mode { Same, Scalar, Suffix, Table };
  Mode mode_ = Mode::Same;
  std::size_t mod_ = 1;
  std::vector<std::size_t> table_;
};

// Splits `shape` around `axis` into (outer, dim, inner) extents.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t dim = 1;
  std::size_t inner = 1;
};

std::size_t normalize_axis(std::int64_t axis, std::size_t rank) {
  const auto r = static_cast<std::int64_t>(rank);
  const auto a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.dim = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

enum class Binary { Add, Sub, Mul, Div };

Tensor binary(Binary op, OpKind kind, const Tensor& a, const Tensor& b) {
  Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  auto ma = std::make_shared<IndexMap>(a.shape(), out_shape);
  auto mb = std::make_shared<IndexMap>(b.shape(), out_shape);
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  switch (op) {
    case Binary::Add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[(*ma)(i)] + bv[(*mb)(i)];
      break;
    case Binary::Sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[(*ma)(i)] - bv[(*mb)(i)];
      break;
    case Binary::Mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[(*ma)(i)] * bv[(*mb)(i)];
      break;
    case Binary::Div:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[(*ma)(i)] / bv[(*mb)(i)];
      break;
  }
  return Tape::current().record(
      kind, std::move(out_shape), std::move(out), {&a, &b},
      [op, a, b, ma, mb, n](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
        const auto& av = a.values();
        const auto& bv = b.values();
        if (auto* ga = gin[0]) {
          switch (op) {
            case Binary::Add:
            case Binary::Sub:
              for (std::size_t i = 0; i < n; ++i) (*ga)[(*ma)(i)] += g[i];
              break;
            case Binary::Mul:
              for (std::size_t i = 0; i < n; ++i) (*ga)[(*ma)(i)] += g[i] * bv[(*mb)(i)];
              break;
            case Binary::Div:
              for (std::size_t i = 0; i < n; ++i) (*ga)[(*ma)(i)] += g[i] / bv[(*mb)(i)];
              break;
          }
        }
        if (auto* gb = gin[1]) {
          switch (op) {
            case Binary::Add:
              for (std::size_t i = 0; i < n; ++i) (*gb)[(*mb)(i)] += g[i];
              break;
            case Binary::Sub:
              for (std::size_t i = 0; i < n; ++i) (*gb)[(*mb)(i)] -= g[i];
              break;
            case Binary::Mul:
              for (std::size_t i = 0; i < n; ++i) (*gb)[(*mb)(i)] += g[i] * av[(*ma)(i)];
              break;
            case Binary::Div:
              for (std::size_t i = 0; i < n; ++i) {
                const double bval = bv[(*mb)(i)];
                (*gb)[(*mb)(i)] -= g[i] * av[(*ma)(i)] / (bval * bval);
              }
              break;
          }
        }
      });
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// GA[m,k] += G[m,n] * B[k,n]^T
void gemm_nt(const double* g, const double* b, double* ga, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    double* arow = ga + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      arow[p] += acc;
    }
  }
}

// GB[k,n] += A[m,k]^T * G[m,n]
void gemm_tn(const double* a, const double* g, double* gb, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* brow = gb + p * n;
      for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
    }
  }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = std::exp(-0.5 * x * x) * (std::numbers::inv_sqrtpi * kInvSqrt2);
  return cdf + x * pdf;
}

void check_temperature(double t, const char* what) {
  if (!(t > 0.0)) throw ArgumentError(std::string(what) + ": temperature must be positive");
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + shape_to_string(a) + " with " + shape_to_string(b));
    }
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::Add, OpKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::Sub, OpKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::Mul, OpKind::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(Binary::Div, OpKind::Div, a, b); }

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.values());
  for (auto& v : out) v *= factor;
  return Tape::current().record(OpKind::Scale, x.shape(), std::move(out), {&x},
                                [factor](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
                                  auto& gx = *gin[0];
                                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
                                });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(xv[i]);
  return Tape::current().record(OpKind::Gelu, x.shape(), std::move(out), {&x},
                                [x](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
                                  auto& gx = *gin[0];
                                  const auto& xv = x.values();
                                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gelu_derivative(xv[i]);
                                });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw DimensionError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  const std::size_t n = b.dim(-1);
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch_out;
  try {
    batch_out = broadcast_shapes(batch_a, batch_b);
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch dimensions of " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()) + " do not broadcast");
  }
  const std::size_t batches = shape_numel(batch_out);
  auto ma = std::make_shared<IndexMap>(batch_a, batch_out);
  auto mb = std::make_shared<IndexMap>(batch_b, batch_out);
  std::vector<double> out(batches * m * n, 0.0);
  for (std::size_t bi = 0; bi < batches; ++bi) {
    gemm_nn(a.values().data() + (*ma)(bi) * m * k, b.values().data() + (*mb)(bi) * k * n, out.data() + bi * m * n, m,
            k, n);
  }
  Shape out_shape = batch_out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  return Tape::current().record(
      OpKind::MatMul, std::move(out_shape), std::move(out), {&a, &b},
      [a, b, ma, mb, batches, m, k, n](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
        for (std::size_t bi = 0; bi < batches; ++bi) {
          const double* gp = g.data() + bi * m * n;
          if (gin[0]) gemm_nt(gp, b.values().data() + (*mb)(bi) * k * n, gin[0]->data() + (*ma)(bi) * m * k, m, k, n);
          if (gin[1]) gemm_tn(a.values().data() + (*ma)(bi) * m * k, gp, gin[1]->data() + (*mb)(bi) * k * n, m, k, n);
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0.0)) throw ArgumentError("layer_norm: eps must be positive");
  const std::size_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: gamma/beta " + shape_to_string(gamma.shape()) + "/" +
                         shape_to_string(beta.shape()) + " do not match last axis of " + shape_to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return Tape::current().record(
      OpKind::LayerNorm, x.shape(), std::move(out), {&x, &gamma, &beta},
      [gamma, xhat, rstd, rows, d](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
        const auto& gv = gamma.values();
        if (auto* gg = gin[1]) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += g[r * d + j] * (*xhat)[r * d + j];
        }
        if (auto* gb = gin[2]) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += g[r * d + j];
        }
        if (auto* gx = gin[0]) {
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_gh = 0.0;
            double mean_ghh = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[r * d + j] * gv[j];
              mean_gh += gh;
              mean_ghh += gh * (*xhat)[r * d + j];
            }
            mean_gh *= inv_d;
            mean_ghh *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[r * d + j] * gv[j];
              (*gx)[r * d + j] += (*rstd)[r] * (gh - mean_gh - (*xhat)[r * d + j] * mean_ghh);
            }
          }
        }
      });
}

Tensor softmax(const Tensor& x, double temperature) {
  check_temperature(temperature, "softmax");
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  auto y = std::make_shared<std::vector<double>>(x.numel());
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double* yr = y->data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp((row[j] - mx) / temperature);
      total += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= total;
  }
  std::vector<double> out(*y);
  return Tape::current().record(
      OpKind::Softmax, x.shape(), std::move(out), {&x},
      [y, rows, n, temperature](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
        auto& gx = *gin[0];
        for (std::size_t r = 0; r < rows; ++r) {
          const double* yr = y->data() + r * n;
          const double* gr = g.data() + r * n;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
          for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += yr[j] * (gr[j] - dot) / temperature;
        }
      });
}

Tensor log_softmax(const Tensor& x, double temperature) {
  check_temperature(temperature, "log_softmax");
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  auto probs = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp((row[j] - mx) / temperature);
    const double lse = std::log(total);
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = (row[j] - mx) / temperature - lse;
      (*probs)[r * n + j] = std::exp(out[r * n + j]);
    }
  }
  return Tape::current().record(
      OpKind::LogSoftmax, x.shape(), std::move(out), {&x},
      [probs, rows, n, temperature](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
        auto& gx = *gin[0];
        for (std::size_t r = 0; r < rows; ++r) {
          double gsum = 0.0;
          for (std::size_t j = 0; j < n; ++j) gsum += g[r * n + j];
          for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += (g[r * n + j] - (*probs)[r * n + j] * gsum) / temperature;
        }
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_to_string(x.shape()) + " to " + shape_to_string(shape));
  }
  return Tape::current().record(OpKind::Reshape, std::move(shape), x.values(), {&x},
                                [](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
                                  auto& gx = *gin[0];
                                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw DimensionError("permute: expected " + std::to_string(r) + " axes");
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    if (a >= r || seen[a]) throw DimensionError("permute: invalid axis permutation");
    seen[a] = true;
  }
  const Shape& in = x.shape();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * in[i + 1];
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[axes[i]];
    stride[i] = in_stride[axes[i]];
  }
  const std::size_t n = x.numel();
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    (*map)[flat] = offset;
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      offset += stride[ax];
      if (idx[ax] < out_shape[ax]) break;
      offset -= stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  std::vector<double> out(n);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[(*map)[i]];
  return Tape::current().record(OpKind::Permute, std::move(out_shape), std::move(out), {&x},
                                [map](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
                                  auto& gx = *gin[0];
                                  for (std::size_t i = 0; i < g.size(); ++i) gx[(*map)[i]] += g[i];
                                });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_to_string(x.shape()));
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

Tensor slice(const Tensor& x, std::int64_t axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_at(x.shape(), ax);
  if (length == 0 || start + length > s.dim) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) + ") out of range for " +
                         shape_to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  std::vector<double> out(s.outer * length * s.inner);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * s.dim + start) * s.inner), length * s.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
  }
  return Tape::current().record(OpKind::Slice, std::move(out_shape), std::move(out), {&x},
                                [s, start, length](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
                                  auto& gx = *gin[0];
                                  const std::size_t block = length * s.inner;
                                  for (std::size_t o = 0; o < s.outer; ++o) {
                                    double* dst = gx.data() + (o * s.dim + start) * s.inner;
                                    const double* src = g.data() + o * block;
                                    for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                                  }
                                });
}

Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis) {
  if (parts.empty()) throw ArgumentError("concat: no inputs");
  const std::size_t ax = normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  std::vector<std::size_t> dims;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != out_shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < probe.size(); ++i) {
      if (i != ax && probe[i] != parts[0].shape()[i]) {
        throw DimensionError("concat: " + shape_to_string(p.shape()) + " vs " + shape_to_string(parts[0].shape()));
      }
    }
    dims.push_back(probe[ax]);
    out_shape[ax] += probe[ax];
  }
  const AxisSplit s = split_at(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& pv = parts[pi].values();
    const std::size_t block = dims[pi] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>((o * s.dim + offset) * s.inner));
    }
    offset += dims[pi];
  }
  std::vector<const Tensor*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  return Tape::current().record(
      OpKind::Concat, std::move(out_shape), std::move(out), inputs,
      [s, dims](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
        std::size_t offset = 0;
        for (std::size_t pi = 0; pi < dims.size(); ++pi) {
          const std::size_t block = dims[pi] * s.inner;
          if (auto* gp = gin[pi]) {
            for (std::size_t o = 0; o < s.outer; ++o) {
              const double* src = g.data() + (o * s.dim + offset) * s.inner;
              double* dst = gp->data() + o * block;
              for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
            }
          }
          offset += dims[pi];
        }
      });
}

Tensor expand(const Tensor& x, const Shape& shape) {
  if (broadcast_shapes(x.shape(), shape) != shape) {
    throw DimensionError("expand: " + shape_to_string(x.shape()) + " to " + shape_to_string(shape));
  }
  auto map = std::make_shared<IndexMap>(x.shape(), shape);
  const std::size_t n = shape_numel(shape);
  std::vector<double> out(n);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[(*map)(i)];
  return Tape::current().record(OpKind::Expand, shape, std::move(out), {&x},
                                [map](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
                                  auto& gx = *gin[0];
                                  for (std::size_t i = 0; i < g.size(); ++i) gx[(*map)(i)] += g[i];
                                });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::vector<std::size_t>>& indices) {
  if (x.rank() != 3 || indices.size() != x.dim(0)) {
    throw DimensionError("gather_rows: expected [B,N,D] with B index lists, got " + shape_to_string(x.shape()));
  }
  const std::size_t b = x.dim(0);
  const std::size_t n = x.dim(1);
  const std::size_t d = x.dim(2);
  const std::size_t k = indices.empty() ? 0 : indices[0].size();
  if (k == 0) throw DimensionError("gather_rows: empty index list");
  for (const auto& row : indices) {
    if (row.size() != k) throw DimensionError("gather_rows: ragged index lists");
    for (auto i : row)
      if (i >= n) throw DimensionError("gather_rows: index " + std::to_string(i) + " out of range");
  }
  std::vector<double> out(b * k * d);
  const auto& xv = x.values();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t j = 0; j < k; ++j)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((bi * n + indices[bi][j]) * d), d,
                  out.begin() + static_cast<std::ptrdiff_t>((bi * k + j) * d));
  return Tape::current().record(OpKind::Gather, Shape{b, k, d}, std::move(out), {&x},
                                [indices, b, n, k, d](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
                                  auto& gx = *gin[0];
                                  for (std::size_t bi = 0; bi < b; ++bi)
                                    for (std::size_t j = 0; j < k; ++j) {
                                      double* dst = gx.data() + (bi * n + indices[bi][j]) * d;
                                      const double* src = g.data() + (bi * k + j) * d;
                                      for (std::size_t t = 0; t < d; ++t) dst[t] += src[t];
                                    }
                                });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return Tape::current().record(OpKind::Sum, Shape{1}, {total}, {&x},
                                [](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
                                  for (auto& v : *gin[0]) v += g[0];
                                });
}

Tensor mean(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  return Tape::current().record(OpKind::Mean, Shape{1}, {total * inv}, {&x},
                                [inv](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
                                  for (auto& v : *gin[0]) v += g[0] * inv;
                                });
}

Tensor mse_masked(const Tensor& pred, const Tensor& target, const std::vector<bool>& mask) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse_masked: prediction " + shape_to_string(pred.shape()) + " vs target " +
                         shape_to_string(target.shape()));
  }
  const std::size_t d = pred.dim(-1);
  const std::size_t rows = pred.numel() / d;
  if (mask.size() != rows) throw DimensionError("mse_masked: mask has " + std::to_string(mask.size()) + " entries, expected " + std::to_string(rows));
  const auto count = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (count == 0) throw ArgumentError("mse_masked: empty mask");
  const auto& pv = pred.values();
  const auto& tv = target.values();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    double row = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double e = pv[r * d + j] - tv[r * d + j];
      row += e * e;
    }
    total += row / static_cast<double>(d);
  }
  const double denom = static_cast<double>(count);
  return Tape::current().record(
      OpKind::MseMasked, Shape{1}, {total / denom}, {&pred},
      [pred, target, mask, rows, d, denom](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
        auto& gp = *gin[0];
        const auto& pv = pred.values();
        const auto& tv = target.values();
        const double f = 2.0 * g[0] / (static_cast<double>(d) * denom);
        for (std::size_t r = 0; r < rows; ++r) {
          if (!mask[r]) continue;
          for (std::size_t j = 0; j < d; ++j) gp[r * d + j] += f * (pv[r * d + j] - tv[r * d + j]);
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [R,K], got " + shape_to_string(logits.shape()));
  const std::size_t rows = logits.dim(0);
  const std::size_t k = logits.dim(1);
  if (labels.size() != rows) throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const auto& xv = logits.values();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (lab[r] >= k) throw ArgumentError("cross_entropy: label " + std::to_string(lab[r]) + " out of range");
    const double* row = xv.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] = std::exp(row[j] - lse);
    total += lse - row[lab[r]];
  }
  const double inv = 1.0 / static_cast<double>(rows);
  return Tape::current().record(
      OpKind::CrossEntropy, Shape{1}, {total * inv}, {&logits},
      [probs, lab, rows, k, inv](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
        auto& gx = *gin[0];
        const double f = g[0] * inv;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += f * (*probs)[r * k + j];
          gx[r * k + lab[r]] -= f;
        }
      });
}

Tensor soft_cross_entropy(const Tensor& teacher_probs, const Tensor& student_logits, double student_temperature) {
  check_temperature(student_temperature, "soft_cross_entropy");
  if (teacher_probs.shape() != student_logits.shape() || student_logits.rank() != 2) {
    throw DimensionError("soft_cross_entropy: teacher " + shape_to_string(teacher_probs.shape()) + " vs student " +
                         shape_to_string(student_logits.shape()));
  }
  const std::size_t rows = student_logits.dim(0);
  const std::size_t k = student_logits.dim(1);
  auto probs = std::make_shared<std::vector<double>>(student_logits.numel());
  auto teacher = std::make_shared<std::vector<double>>(teacher_probs.values());
  const auto& sv = student_logits.values();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = sv.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp((row[j] - mx) / student_temperature);
    const double lz = std::log(z);
    for (std::size_t j = 0; j < k; ++j) {
      const double logp = (row[j] - mx) / student_temperature - lz;
      (*probs)[r * k + j] = std::exp(logp);
      total -= (*teacher)[r * k + j] * logp;
    }
  }
  const double inv = 1.0 / static_cast<double>(rows);
  return Tape::current().record(
      OpKind::SoftCrossEntropy, Shape{1}, {total * inv}, {&student_logits},
      [probs, teacher, rows, k, inv, student_temperature](const std::vector<double>& g,
                                                          std::span<std::vector<double>* const> gin) {
        auto& gx = *gin[0];
        const double f = g[0] * inv / student_temperature;
        for (std::size_t r = 0; r < rows; ++r) {
          double tsum = 0.0;
          for (std::size_t j = 0; j < k; ++j) tsum += (*teacher)[r * k + j];
          for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += f * ((*probs)[r * k + j] * tsum - (*teacher)[r * k + j]);
        }
      });
}

Tensor dice_loss(const Tensor& probs, const Tensor& targets, double smooth) {
  if (probs.shape() != targets.shape()) {
    throw DimensionError("dice_loss: probabilities " + shape_to_string(probs.shape()) + " vs targets " +
                         shape_to_string(targets.shape()));
  }
  const auto& pv = probs.values();
  const auto& qv = targets.values();
  double inter = 0.0, psum = 0.0, qsum = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    inter += pv[i] * qv[i];
    psum += pv[i];
    qsum += qv[i];
  }
  const double num = 2.0 * inter + smooth;
  const double den = psum + qsum + smooth;
  return Tape::current().record(OpKind::Dice, Shape{1}, {1.0 - num / den}, {&probs},
                                [targets, num, den](const std::vector<double>& g, std::span<std::vector<double>* const> gin) {
                                  auto& gp = *gin[0];
                                  const auto& qv = targets.values();
                                  const double den2 = den * den;
                                  for (std::size_t i = 0; i < gp.size(); ++i)
                                    gp[i] -= g[0] * (2.0 * qv[i] * den - num) / den2;
                                });
}

}  // namespace tpp
