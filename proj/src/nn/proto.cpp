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
#include "normlab/proto.hpp"

#include <cmath>

#include "normlab/ops.hpp"

namespace normlab {

Tensor prototype_logits_from_embeddings(const Tensor& query, const Tensor& prototypes, const Tensor& alpha) {
  if (query.rank() != 2 || prototypes.rank() != 2 || query.dim(1) != prototypes.dim(1)) {
    throw ShapeError("prototype logits: incompatible embeddings " + shape_str(query.shape()) + " and " +
                     shape_str(prototypes.shape()));
  }
  const std::size_t q = query.dim(0), m = prototypes.dim(0), e = query.dim(1);
  Tensor diff = sub(reshape(query, {q, 1, e}), reshape(prototypes, {1, m, e}));
  Tensor dist = reshape(sum(mul(diff, diff), {2}), {q, m});
  return scale(mul(dist, reshape(alpha, {1, 1})), -1.0);
}

Tensor class_means(const Tensor& embeddings, std::span<const std::size_t> labels, std::size_t num_classes) {
  if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size()) {
    throw ShapeError("class means: " + std::to_string(labels.size()) + " labels for embeddings " +
                     shape_str(embeddings.shape()));
  }
  if (num_classes == 0) throw ShapeError("class means: no classes");
  std::vector<std::size_t> count(num_classes, 0);
  for (std::size_t l : labels) {
    if (l >= num_classes) throw ShapeError("class means: label " + std::to_string(l) + " out of range");
    ++count[l];
  }
  for (std::size_t m = 0; m < num_classes; ++m) {
    if (count[m] == 0) throw ShapeError("class means: class " + std::to_string(m) + " has no support sample");
  }
  std::vector<double> avg(num_classes * labels.size(), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    avg[labels[i] * labels.size() + i] = 1.0 / static_cast<double>(count[labels[i]]);
  }
  return matmul(Tensor({num_classes, labels.size()}, std::move(avg)), embeddings);
}

ProtoHead::ProtoHead(const ProtoConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.task_dim == 0 || cfg.task_dim % 2 != 0) throw ConfigError("task_dim must be positive and even");
  std::mt19937_64 rng(seed);
  TrunkConfig t;
  t.in_channels = cfg.in_channels;
  t.stem_channels = cfg.stem_channels;
  t.stem_layers = cfg.stem_layers;
  t.stem_patch = cfg.stem_patch;
  t.num_blocks = cfg.num_blocks;
  t.block_channels = cfg.block_channels;
  t.cond_dim = cfg.task_dim;
  t.groups = cfg.groups;
  t.eps = cfg.eps;
  t.coord_maps = cfg.coord_maps;
  t.stem_domain = cfg.domain;
  t.block_domain = cfg.domain;
  trunk_ = ConditionedTrunk(t, rng);
  project_ = LinearLayer::create(cfg.block_channels, cfg.embed_dim, rng, 0.1);
  ten_a_ = LinearLayer::create(cfg.embed_dim, cfg.task_dim / 2, rng);
  ten_b_ = LinearLayer::create(cfg.embed_dim, cfg.task_dim / 2, rng);
  alpha_raw_ = Tensor({1}, {std::log(std::exp(1.0) - 1.0)}).set_requires_grad();
}

Tensor ProtoHead::embed(const Tensor& images, const Tensor& c) {
  Tensor h = trunk_.forward(images, c);
  const std::size_t n = h.dim(0), ch = h.dim(1);
  return project_.forward(reshape(max(h, {2, 3}), {n, ch}));
}

Tensor ProtoHead::task_embedding(const Tensor& mean_prototype) {
  Tensor p = reshape(mean_prototype, {1, cfg_.embed_dim});
  return reshape(concat({ten_a_.forward(p), ten_b_.forward(p)}, 1), {cfg_.task_dim});
}

Tensor ProtoHead::alpha() const { return softplus(alpha_raw_); }

ProtoHead::Output ProtoHead::forward(const Tensor& support, std::span<const std::size_t> support_labels,
                                     std::size_t num_classes, const Tensor& query) {
  if (support.rank() != 4 || support.dim(0) != support_labels.size()) {
    throw ShapeError("proto head: support " + shape_str(support.shape()) + " with " +
                     std::to_string(support_labels.size()) + " labels");
  }
  Output out;
  const Tensor zero = Tensor::zeros({cfg_.task_dim});
  out.prototypes = class_means(embed(support, zero), support_labels, num_classes);
  out.task = task_embedding(mean(out.prototypes, {0}));
  out.conditioned = class_means(embed(support, out.task), support_labels, num_classes);
  out.logits = prototype_logits_from_embeddings(embed(query, out.task), out.conditioned, alpha());
  return out;
}

NamedTensors ProtoHead::parameters() const {
  NamedTensors out;
  append_prefixed(out, "trunk", trunk_.parameters());
  append_prefixed(out, "project", project_.parameters());
  append_prefixed(out, "ten_a", ten_a_.parameters());
  append_prefixed(out, "ten_b", ten_b_.parameters());
  out.emplace_back("alpha_raw", alpha_raw_);
  return out;
}

}  // namespace normlab
