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
#include "normlab/optim.hpp"

#include <cmath>

namespace normlab {

Optimizer::Optimizer(NamedTensors params) : params_(std::move(params)) {
  for (const auto& [name, p] : params_) {
    if (!p.is_leaf() || !p.requires_grad()) throw ConfigError("optimizer parameter '" + name + "' is not trainable");
  }
}

void Optimizer::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

void Optimizer::check_gradients() const {
  for (const auto& [name, p] : params_) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter '" + name + "'");
    }
  }
}

Adam::Adam(NamedTensors params, AdamOptions options) : Optimizer(std::move(params)), opt_(options) {
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  check_gradients();
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(opt_.beta1, t);
  const double c2 = 1.0 - std::pow(opt_.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k].second;
    auto data = p.mutable_data();
    const bool has = p.has_grad();
    std::span<const double> g = has ? p.grad() : std::span<const double>();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
      v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
      data[i] -= opt_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
    }
  }
}

Sgd::Sgd(NamedTensors params, SgdOptions options) : Optimizer(std::move(params)), opt_(options) {
  for (const auto& [name, p] : params_) u_.emplace_back(p.numel(), 0.0);
}

void Sgd::step() {
  check_gradients();
  ++steps_;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k].second;
    auto data = p.mutable_data();
    const bool has = p.has_grad();
    std::span<const double> g = has ? p.grad() : std::span<const double>();
    auto& u = u_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      u[i] = opt_.momentum * u[i] + (has ? g[i] : 0.0);
      data[i] -= opt_.lr * u[i];
    }
  }
}

}  // namespace normlab
