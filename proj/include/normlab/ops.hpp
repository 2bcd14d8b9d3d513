/* Copyright 2026 The NormLab Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License. */
#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "normlab/autograd.hpp"
#include "normlab/tensor.hpp"

// Differentiable operations. Every function here records onto the current
// thread's tape when an operand requires a gradient, and every recorded name
// appears in differentiable_ops() so the gradient-check runner can prove
// coverage.
namespace normlab {

/// Names of all operations with a backward rule.
std::span<const std::string_view> differentiable_ops();

// Elementwise. Operands must have equal rank; an axis of extent 1 broadcasts
// against any extent. No implicit rank promotion.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Throws NumericalError if the divisor contains an exact zero.
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor scale(const Tensor& a, double s);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
/// Requires x > 0 elementwise.
Tensor sqrt(const Tensor& x);
Tensor softplus(const Tensor& x);

// Reductions keep reduced axes with extent 1. An empty axis set is the
// identity.
Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes);
/// Ties resolve to the first maximal element in row-major order.
Tensor max(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& shape);
/// Concatenates equal-rank tensors along `axis`.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

/// a[m, k] . b[k, n] -> [m, n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[n, in] . w[out, in]^T + bias[out] -> [n, out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Cross-correlation (no kernel flip), stride 1, symmetric zero padding.
/// x[N, Cin, H, W], w[Cout, Cin, kh, kw], bias[Cout] (may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t padding);

/// Non-overlapping max pooling with a square window; H and W must be
/// divisible by `window`.
Tensor max_pool2d(const Tensor& x, std::size_t window);

/// Moves each block x block patch into channels: [N, C, H, W] ->
/// [N, C * block^2, H / block, W / block], with output channel
/// (c * block + i) * block + j holding patch offset (i, j) of channel c.
Tensor space_to_depth(const Tensor& x, std::size_t block);

/// Gathers rows of table[V, E] -> [ids.size(), E].
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);

/// Mean of every set of a plane partition (see norm.hpp): x[N, C, H, W] ->
/// [num_sets], where plane_set[n * C + c] names the set holding the whole
/// H x W plane of sample n, channel c.
Tensor set_mean(const Tensor& x, std::span<const std::size_t> plane_set, std::size_t num_sets);
/// Inverse layout of set_mean: v[num_sets] -> [N, C, H, W] with each plane
/// filled by its set's value.
Tensor set_broadcast(const Tensor& v, std::span<const std::size_t> plane_set, const Shape& shape);

struct SetMoments {
  std::vector<double> mean;
  std::vector<double> var;  // biased
};

/// Fused (x - mean_S) / sqrt(var_S + eps) over the sets of a plane
/// partition, with gradients through both statistics. The per-set moments are
/// written to `moments` when given.
Tensor set_normalize(const Tensor& x, std::span<const std::size_t> plane_set, std::size_t num_sets, double eps,
                     SetMoments* moments = nullptr);

/// Mean over the batch of -log softmax(logits)[label]. logits[N, A].
Tensor softmax_xent(const Tensor& logits, std::span<const std::size_t> labels);

/// Row-wise softmax without recording; for reporting.
std::vector<double> softmax_rows(const Tensor& logits);

}  // namespace normlab
