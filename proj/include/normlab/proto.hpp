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

#include <cstdint>
#include <span>
#include <vector>

#include "normlab/film.hpp"

namespace normlab {

struct ProtoConfig {
  std::size_t in_channels = 3;
  std::size_t stem_channels = 16;
  std::size_t stem_layers = 1;
  std::size_t stem_patch = 2;
  std::size_t num_blocks = 2;
  std::size_t block_channels = 16;
  std::size_t embed_dim = 32;
  std::size_t task_dim = 16;  // dimension of the task embedding; even
  std::size_t groups = 4;
  double eps = 1e-5;
  bool coord_maps = false;
  DomainKind domain = DomainKind::Group;
};

/// logits[q, m] = -alpha * ||query[q] - prototypes[m]||^2 for query[Q, E],
/// prototypes[M, E] and alpha[1].
Tensor prototype_logits_from_embeddings(const Tensor& query, const Tensor& prototypes, const Tensor& alpha);

/// Class means of embeddings[S, E] grouped by labels in [0, M): [M, E].
/// Throws ShapeError when a class has no sample.
Tensor class_means(const Tensor& embeddings, std::span<const std::size_t> labels, std::size_t num_classes);

/// Metric-scaled prototype classifier with task conditioning.
///   1. p_m  = mean of f(x, 0) over the support of class m
///   2. G    = ten(mean_m p_m)
///   3. p'_m = mean of f(x, G) over the support of class m
///   4. logit_m(q) = -alpha * ||f(q, G) - p'_m||^2
/// The task embedding network `ten` is two independent affine maps whose
/// outputs are concatenated into G. alpha = softplus(alpha_raw).
class ProtoHead {
 public:
  struct Output {
    Tensor logits;       // [Q, M]
    Tensor prototypes;   // [M, E], unconditioned
    Tensor task;         // [task_dim]
    Tensor conditioned;  // [M, E]
  };

  ProtoHead() = default;
  ProtoHead(const ProtoConfig& cfg, std::uint64_t seed);

  /// f(images, c): [N, in_channels, H, W] -> [N, embed_dim].
  Tensor embed(const Tensor& images, const Tensor& c);
  Tensor task_embedding(const Tensor& mean_prototype);
  Tensor alpha() const;

  Output forward(const Tensor& support, std::span<const std::size_t> support_labels, std::size_t num_classes,
                 const Tensor& query);

  void set_mode(NormMode mode) { trunk_.set_mode(mode); }
  NamedTensors parameters() const;
  NamedTensors buffers() const { return trunk_.buffers(); }
  std::vector<NormLayerInfo> norm_layers() const { return trunk_.norm_layers(); }
  const ProtoConfig& config() const { return cfg_; }
  Tensor& alpha_raw() { return alpha_raw_; }

 private:
  ProtoConfig cfg_;
  ConditionedTrunk trunk_;
  LinearLayer project_;
  LinearLayer ten_a_;
  LinearLayer ten_b_;
  Tensor alpha_raw_;
};

}  // namespace normlab
