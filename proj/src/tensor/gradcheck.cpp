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
#include "normlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "normlab/autograd.hpp"

namespace normlab {

Tensor fd_gradient(const std::function<double(const Tensor&)>& f, Tensor x, double step) {
  if (!(step > 0)) throw ConfigError("fd_gradient: step must be positive");
  NoGradGuard guard;
  auto xd = x.impl()->data.data();
  std::vector<double> g(x.numel());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double orig = xd[i];
    xd[i] = orig + step;
    const double fp = f(x);
    xd[i] = orig - step;
    const double fm = f(x);
    xd[i] = orig;
    g[i] = (fp - fm) / (2.0 * step);
  }
  return Tensor(x.shape(), std::move(g));
}

double grad_rel_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult check_gradients(const ScalarFn& loss_fn, std::vector<std::pair<std::string, Tensor>> wrt,
                                double step, std::size_t max_elements_per_tensor, std::uint64_t seed) {
  for (auto& [name, t] : wrt) {
    if (!t.is_leaf() || !t.requires_grad()) {
      throw AutogradError("check_gradients: '" + name + "' is not a leaf requiring a gradient");
    }
    t.zero_grad();
  }
  Tape::current().clear();
  Tensor loss = loss_fn();
  backward(loss);

  GradCheckResult result;
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : wrt) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());

    std::vector<std::size_t> idx(t.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (max_elements_per_tensor > 0 && idx.size() > max_elements_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_elements_per_tensor);
      std::sort(idx.begin(), idx.end());
    }

    NoGradGuard guard;
    auto xd = t.impl()->data.data();
    for (auto i : idx) {
      const double orig = xd[i];
      xd[i] = orig + step;
      const double fp = loss_fn().item();
      xd[i] = orig - step;
      const double fm = loss_fn().item();
      xd[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = grad_rel_error(analytic[i], numeric);
      ++result.checked;
      if (err > result.worst_rel_error || result.worst_location.empty()) {
        result.worst_rel_error = std::max(result.worst_rel_error, err);
        if (err >= result.worst_rel_error) result.worst_location = name + "[" + std::to_string(i) + "]";
      }
    }
    t.zero_grad();
  }
  return result;
}

}  // namespace normlab
