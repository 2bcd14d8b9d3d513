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

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "normlab/norm.hpp"
#include "normlab/tensor.hpp"

namespace normlab {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Appends `items` to `out` with every name prefixed by `prefix` + ".".
void append_prefixed(NamedTensors& out, const std::string& prefix, const NamedTensors& items);

/// Normal(0, gain * sqrt(2 / fan_in)) tensor that requires a gradient.
Tensor he_normal(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng, double gain = 1.0);

struct Conv2dLayer {
  Tensor weight;  // [Cout, Cin, k, k]
  Tensor bias;    // [Cout]
  std::size_t padding = 0;

  /// Size-preserving convolution: padding k / 2.
  static Conv2dLayer create(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                            std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const;
  NamedTensors parameters() const { return {{"weight", weight}, {"bias", bias}}; }
};

struct LinearLayer {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  static LinearLayer create(std::size_t in_features, std::size_t out_features, std::mt19937_64& rng,
                            double gain = 1.0);
  Tensor forward(const Tensor& x) const;
  NamedTensors parameters() const { return {{"weight", weight}, {"bias", bias}}; }
};

/// Two constant channels holding the row and column coordinate of every
/// pixel, scaled to [-1, 1]: [N, 2, H, W].
Tensor coordinate_maps(std::size_t n, std::size_t h, std::size_t w);

/// Gated recurrent unit over token sequences:
///   z  = sigmoid(W_z x + U_z h + b_z)
///   r  = sigmoid(W_r x + U_r h + b_r)
///   h~ = tanh(W_h x + U_h (r * h) + b_h)
///   h' = (1 - z) * h + z * h~
/// starting from h = 0.
struct GruEncoder {
  Tensor embedding;  // [V, E]
  Tensor w_z, u_z, b_z;
  Tensor w_r, u_r, b_r;
  Tensor w_h, u_h, b_h;

  static GruEncoder create(std::size_t vocab, std::size_t embed_dim, std::size_t hidden, std::mt19937_64& rng);

  std::size_t vocab() const { return embedding.dim(0); }
  std::size_t hidden() const { return b_z.numel(); }

  /// Final hidden state [hidden]; the zero state for an empty sequence.
  Tensor encode(std::span<const std::size_t> tokens) const;
  /// Batched encoding of equal-length sequences: [N, hidden].
  Tensor encode_batch(const std::vector<std::vector<std::size_t>>& sequences) const;

  NamedTensors parameters() const;
};

/// Identity of one normalization layer inside a model, for introspection.
struct NormLayerInfo {
  std::string name;
  DomainKind domain;
  AffineKind affine;
};

}  // namespace normlab
