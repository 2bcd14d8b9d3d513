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

#include <optional>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "normlab/tensor.hpp"

// Normalization layers as one statistics operator over a choice of index
// sets. For a feature map x[N, C, H, W] every position i belongs to exactly
// one set S_i, and
//
//   mu_i    = (1/m) sum_{k in S_i} x_k
//   sigma_i = sqrt((1/m) sum_{k in S_i} (x_k - mu_i)^2 + eps)
//   y_i     = gamma * (x_i - mu_i) / sigma_i + beta
//
// The four domains differ only in which positions share a set:
//   Batch:    k_C == i_C
//   Layer:    k_N == i_N
//   Instance: k_N == i_N and k_C == i_C
//   Group(G): k_N == i_N and floor(k_C / (C/G)) == floor(i_C / (C/G))
//
// Every domain assigns whole H x W planes to sets, so a partition is stored
// as one set id per (n, c) plane.
namespace normlab {

enum class DomainKind { Batch, Layer, Instance, Group };

struct StatDomain {
  DomainKind kind = DomainKind::Group;
  std::size_t groups = 4;  // Group only

  static StatDomain batch() { return {DomainKind::Batch, 0}; }
  static StatDomain layer() { return {DomainKind::Layer, 0}; }
  static StatDomain instance() { return {DomainKind::Instance, 0}; }
  static StatDomain group(std::size_t g) { return {DomainKind::Group, g}; }

  std::string name() const;
  bool operator==(const StatDomain&) const = default;
};

std::string to_string(DomainKind kind);
DomainKind domain_kind_from_string(const std::string& name);

/// Set membership of every (n, c) plane of an [N, C, H, W] tensor.
struct Partition {
  Shape shape;
  std::vector<std::size_t> plane_set;  // size N * C
  std::size_t num_sets = 0;
  std::size_t set_size = 0;  // m: elements per set (equal for all sets)
};

/// Throws ShapeError for non-4-axis shapes and ConfigError when a Group
/// domain does not divide C.
Partition make_partition(const StatDomain& domain, const Shape& shape);

/// Explicit partition of all flat indices into the sets S. Sets are ordered
/// by set id, indices within a set ascending.
std::vector<std::vector<std::size_t>> index_sets(const StatDomain& domain, const Shape& shape);

struct NormStats {
  Tensor mu;     // [num_sets]
  Tensor var;    // [num_sets], biased
  Tensor sigma;  // [num_sets], sqrt(var + eps)
  std::size_t m = 0;
  Partition partition;
};

/// Statistics of x under `domain`. Recorded on the tape, so gradients of
/// anything computed from the result flow back into x through mu and sigma.
NormStats compute_stats(const Tensor& x, const StatDomain& domain, double eps);

/// (x - mu) / sigma with the statistics broadcast over their sets.
Tensor normalize(const Tensor& x, const NormStats& stats);

/// Parameters of a conditioning-driven scale and shift:
/// gamma(c) = W_gamma c + b_gamma, beta(c) = W_beta c + b_beta.
struct ConditionalAffine {
  Tensor w_gamma;  // [C, D]
  Tensor b_gamma;  // [C]
  Tensor w_beta;   // [C, D]
  Tensor b_beta;   // [C]

  /// Deviation-from-identity initialization: zero weights, unit scale bias,
  /// zero shift bias. c = 0 then leaves normalized activations unchanged.
  static ConditionalAffine identity(std::size_t channels, std::size_t cond_dim);

  std::size_t channels() const { return b_gamma.numel(); }
  std::size_t cond_dim() const { return w_gamma.dim(1); }
};

/// c is [D] (shared by all samples) or [N, D] (per sample). Returns gamma and
/// beta as [C] or [N, C] respectively.
std::pair<Tensor, Tensor> cond_affine(const Tensor& c, const ConditionalAffine& params);

struct FixedAffine {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
};

struct NoAffine {};

using Affine = std::variant<NoAffine, FixedAffine, ConditionalAffine>;

enum class NormMode { Train, Eval };

/// Exponential moving averages of batch statistics (Batch domain only).
struct RunningStats {
  Tensor mu;     // [C]
  Tensor var;    // [C], biased
  Tensor count;  // [1], number of updates so far
  double momentum = 0.9;

  static RunningStats zeros(std::size_t channels, double momentum);
  bool empty() const { return count.item() == 0.0; }
};

/// mu_run <- momentum * mu_run + (1 - momentum) * batch_mu, likewise for the
/// variance.
void update_running(RunningStats& running, std::span<const double> batch_mu, std::span<const double> batch_var);

enum class AffineKind { None, Fixed, Conditional };

std::string to_string(AffineKind kind);

struct NormLayerOptions {
  StatDomain domain = StatDomain::group(4);
  std::size_t channels = 0;
  double eps = 1e-5;
  AffineKind affine = AffineKind::Fixed;
  std::size_t cond_dim = 0;  // Conditional only
  double momentum = 0.9;     // Batch only
};

/// One normalization layer: statistics domain, eps, mode, affine source and
/// (for Batch) running statistics.
class NormLayer {
 public:
  NormLayer() = default;
  explicit NormLayer(const NormLayerOptions& options);

  /// x is [N, C, H, W] or [N, C] (treated as [N, C, 1, 1]). `c` must be given
  /// exactly when the affine is conditional.
  Tensor forward(const Tensor& x, const std::optional<Tensor>& c = std::nullopt);

  void set_mode(NormMode mode) { mode_ = mode; }
  NormMode mode() const { return mode_; }

  const StatDomain& domain() const { return domain_; }
  double eps() const { return eps_; }
  std::size_t channels() const { return channels_; }
  AffineKind affine_kind() const;
  const Affine& affine() const { return affine_; }
  Affine& affine() { return affine_; }
  const std::optional<RunningStats>& running() const { return running_; }
  std::optional<RunningStats>& running() { return running_; }

  /// Trainable tensors with names relative to the layer.
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  /// Non-trainable state (running statistics).
  std::vector<std::pair<std::string, Tensor>> buffers() const;

 private:
  StatDomain domain_;
  double eps_ = 1e-5;
  std::size_t channels_ = 0;
  NormMode mode_ = NormMode::Train;
  Affine affine_;
  std::optional<RunningStats> running_;
};

}  // namespace normlab
