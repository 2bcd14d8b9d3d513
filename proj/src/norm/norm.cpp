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
#include "normlab/norm.hpp"

#include <cmath>

#include "normlab/autograd.hpp"
#include "normlab/ops.hpp"

namespace normlab {

std::string to_string(DomainKind kind) {
  switch (kind) {
    case DomainKind::Batch:
      return "batch";
    case DomainKind::Layer:
      return "layer";
    case DomainKind::Instance:
      return "instance";
    case DomainKind::Group:
      return "group";
  }
  return "?";
}

DomainKind domain_kind_from_string(const std::string& name) {
  if (name == "batch") return DomainKind::Batch;
  if (name == "layer") return DomainKind::Layer;
  if (name == "instance") return DomainKind::Instance;
  if (name == "group") return DomainKind::Group;
  throw ConfigError("unknown statistics domain '" + name + "'");
}

std::string StatDomain::name() const {
  if (kind == DomainKind::Group) return "group(" + std::to_string(groups) + ")";
  return to_string(kind);
}

std::string to_string(AffineKind kind) {
  switch (kind) {
    case AffineKind::None:
      return "none";
    case AffineKind::Fixed:
      return "fixed";
    case AffineKind::Conditional:
      return "conditional";
  }
  return "?";
}

Partition make_partition(const StatDomain& domain, const Shape& shape) {
  if (shape.size() != 4) throw ShapeError("normalization expects [N,C,H,W], got " + shape_str(shape));
  const std::size_t N = shape[0], C = shape[1], HW = shape[2] * shape[3];
  Partition p;
  p.shape = shape;
  p.plane_set.resize(N * C);
  std::size_t planes_per_set = 0;
  switch (domain.kind) {
    case DomainKind::Batch:
      p.num_sets = C;
      planes_per_set = N;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) p.plane_set[n * C + c] = c;
      break;
    case DomainKind::Layer:
      p.num_sets = N;
      planes_per_set = C;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) p.plane_set[n * C + c] = n;
      break;
    case DomainKind::Instance:
      p.num_sets = N * C;
      planes_per_set = 1;
      for (std::size_t i = 0; i < N * C; ++i) p.plane_set[i] = i;
      break;
    case DomainKind::Group: {
      const std::size_t G = domain.groups;
      if (G == 0 || C % G != 0) {
        throw ConfigError("group normalization needs C divisible by G, got C=" + std::to_string(C) +
                          " G=" + std::to_string(G));
      }
      const std::size_t per_group = C / G;
      p.num_sets = N * G;
      planes_per_set = per_group;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) p.plane_set[n * C + c] = n * G + c / per_group;
      break;
    }
  }
  p.set_size = planes_per_set * HW;
  return p;
}

std::vector<std::vector<std::size_t>> index_sets(const StatDomain& domain, const Shape& shape) {
  const Partition p = make_partition(domain, shape);
  const std::size_t HW = shape[2] * shape[3];
  std::vector<std::vector<std::size_t>> sets(p.num_sets);
  for (auto& s : sets) s.reserve(p.set_size);
  for (std::size_t plane = 0; plane < p.plane_set.size(); ++plane) {
    auto& s = sets[p.plane_set[plane]];
    for (std::size_t i = 0; i < HW; ++i) s.push_back(plane * HW + i);
  }
  return sets;
}

NormStats compute_stats(const Tensor& x, const StatDomain& domain, double eps) {
  if (eps < 0) throw ConfigError("eps must be non-negative");
  NormStats st;
  st.partition = make_partition(domain, x.shape());
  st.m = st.partition.set_size;
  const auto& ps = st.partition.plane_set;
  st.mu = set_mean(x, ps, st.partition.num_sets);
  Tensor centered = sub(x, set_broadcast(st.mu, ps, x.shape()));
  st.var = set_mean(mul(centered, centered), ps, st.partition.num_sets);
  st.sigma = sqrt(add_scalar(st.var, eps));
  return st;
}

Tensor normalize(const Tensor& x, const NormStats& stats) {
  if (x.shape() != stats.partition.shape) {
    throw ShapeError("normalize: statistics computed for " + shape_str(stats.partition.shape) + ", input is " +
                     shape_str(x.shape()));
  }
  const auto& ps = stats.partition.plane_set;
  return div(sub(x, set_broadcast(stats.mu, ps, x.shape())), set_broadcast(stats.sigma, ps, x.shape()));
}

ConditionalAffine ConditionalAffine::identity(std::size_t channels, std::size_t cond_dim) {
  ConditionalAffine a;
  a.w_gamma = Tensor::zeros({channels, cond_dim}).set_requires_grad();
  a.b_gamma = Tensor::ones({channels}).set_requires_grad();
  a.w_beta = Tensor::zeros({channels, cond_dim}).set_requires_grad();
  a.b_beta = Tensor::zeros({channels}).set_requires_grad();
  return a;
}

std::pair<Tensor, Tensor> cond_affine(const Tensor& c, const ConditionalAffine& params) {
  const std::size_t D = params.cond_dim();
  const bool shared = c.rank() == 1;
  if (!(shared || c.rank() == 2) || c.shape().back() != D) {
    throw ShapeError("cond_affine: conditioning " + shape_str(c.shape()) + " does not match dimension " +
                     std::to_string(D));
  }
  Tensor rows = shared ? reshape(c, {1, D}) : c;
  Tensor gamma = linear(rows, params.w_gamma, params.b_gamma);
  Tensor beta = linear(rows, params.w_beta, params.b_beta);
  if (shared) {
    gamma = reshape(gamma, {params.channels()});
    beta = reshape(beta, {params.channels()});
  }
  return {gamma, beta};
}

RunningStats RunningStats::zeros(std::size_t channels, double momentum) {
  return RunningStats{Tensor::zeros({channels}), Tensor::zeros({channels}), Tensor::zeros({1}), momentum};
}

void update_running(RunningStats& running, std::span<const double> batch_mu, std::span<const double> batch_var) {
  auto mu = running.mu.mutable_data();
  auto var = running.var.mutable_data();
  if (batch_mu.size() != mu.size() || batch_var.size() != var.size()) {
    throw ShapeError("update_running: statistics size mismatch");
  }
  const double a = running.momentum;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    mu[i] = a * mu[i] + (1.0 - a) * batch_mu[i];
    var[i] = a * var[i] + (1.0 - a) * batch_var[i];
  }
  running.count.mutable_data()[0] += 1.0;
}

NormLayer::NormLayer(const NormLayerOptions& o) : domain_(o.domain), eps_(o.eps), channels_(o.channels) {
  if (!(o.eps > 0)) throw ConfigError("normalization eps must be positive");
  if (o.channels == 0) throw ConfigError("normalization layer needs a positive channel count");
  if (o.domain.kind == DomainKind::Group && (o.domain.groups == 0 || o.channels % o.domain.groups != 0)) {
    throw ConfigError("groups=" + std::to_string(o.domain.groups) + " does not divide " +
                      std::to_string(o.channels) + " channels");
  }
  switch (o.affine) {
    case AffineKind::None:
      affine_ = NoAffine{};
      break;
    case AffineKind::Fixed:
      affine_ = FixedAffine{Tensor::ones({o.channels}).set_requires_grad(),
                            Tensor::zeros({o.channels}).set_requires_grad()};
      break;
    case AffineKind::Conditional:
      if (o.cond_dim == 0) throw ConfigError("conditional normalization needs a conditioning dimension");
      affine_ = ConditionalAffine::identity(o.channels, o.cond_dim);
      break;
  }
  if (o.domain.kind == DomainKind::Batch) running_ = RunningStats::zeros(o.channels, o.momentum);
}

AffineKind NormLayer::affine_kind() const {
  if (std::holds_alternative<FixedAffine>(affine_)) return AffineKind::Fixed;
  if (std::holds_alternative<ConditionalAffine>(affine_)) return AffineKind::Conditional;
  return AffineKind::None;
}

Tensor NormLayer::forward(const Tensor& input, const std::optional<Tensor>& c) {
  const bool flat = input.rank() == 2;
  if (!(flat || input.rank() == 4)) {
    throw ShapeError("normalization input must be [N,C] or [N,C,H,W], got " + shape_str(input.shape()));
  }
  if (input.dim(1) != channels_) {
    throw ShapeError("normalization layer has " + std::to_string(channels_) + " channels, input " +
                     shape_str(input.shape()));
  }
  const bool conditional = affine_kind() == AffineKind::Conditional;
  if (conditional && !c) throw ShapeError("conditional normalization called without conditioning input");
  if (!conditional && c) throw ShapeError("unconditional normalization called with a conditioning input");

  const std::size_t N = input.dim(0);
  Tensor x = flat ? reshape(input, {N, channels_, 1, 1}) : input;

  Tensor xhat;
  if (domain_.kind == DomainKind::Batch && mode_ == NormMode::Eval) {
    if (!running_ || running_->empty()) {
      throw NumericalError("batch normalization in eval mode has no accumulated running statistics");
    }
    NormStats st;
    st.partition = make_partition(domain_, x.shape());
    st.m = st.partition.set_size;
    st.mu = running_->mu.detach();
    st.var = running_->var.detach();
    std::vector<double> sd(channels_);
    for (std::size_t i = 0; i < channels_; ++i) sd[i] = std::sqrt(st.var[i] + eps_);
    st.sigma = Tensor({channels_}, std::move(sd));
    xhat = normalize(x, st);
  } else {
    const Partition part = make_partition(domain_, x.shape());
    SetMoments moments;
    xhat = set_normalize(x, part.plane_set, part.num_sets, eps_, &moments);
    if (domain_.kind == DomainKind::Batch && mode_ == NormMode::Train) {
      update_running(*running_, moments.mean, moments.var);
    }
  }

  Tensor y = xhat;
  if (const auto* fixed = std::get_if<FixedAffine>(&affine_)) {
    y = add(mul(xhat, reshape(fixed->gamma, {1, channels_, 1, 1})), reshape(fixed->beta, {1, channels_, 1, 1}));
  } else if (const auto* cond = std::get_if<ConditionalAffine>(&affine_)) {
    auto [gamma, beta] = cond_affine(*c, *cond);
    std::size_t rows = 1;
    if (gamma.rank() == 2) {
      rows = gamma.dim(0);
      if (rows != N) {
        throw ShapeError("conditioning has " + std::to_string(rows) + " rows for a batch of " + std::to_string(N));
      }
    }
    y = add(mul(xhat, reshape(gamma, {rows, channels_, 1, 1})), reshape(beta, {rows, channels_, 1, 1}));
  }
  return flat ? reshape(y, input.shape()) : y;
}

std::vector<std::pair<std::string, Tensor>> NormLayer::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  if (const auto* fixed = std::get_if<FixedAffine>(&affine_)) {
    out.emplace_back("gamma", fixed->gamma);
    out.emplace_back("beta", fixed->beta);
  } else if (const auto* cond = std::get_if<ConditionalAffine>(&affine_)) {
    out.emplace_back("w_gamma", cond->w_gamma);
    out.emplace_back("b_gamma", cond->b_gamma);
    out.emplace_back("w_beta", cond->w_beta);
    out.emplace_back("b_beta", cond->b_beta);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> NormLayer::buffers() const {
  std::vector<std::pair<std::string, Tensor>> out;
  if (running_) {
    out.emplace_back("running_mu", running_->mu);
    out.emplace_back("running_var", running_->var);
    out.emplace_back("running_count", running_->count);
  }
  return out;
}

}  // namespace normlab
