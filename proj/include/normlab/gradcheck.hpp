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
#include <functional>
#include <string>
#include <vector>

#include "normlab/tensor.hpp"

namespace normlab {

using ScalarFn = std::function<Tensor()>;

/// Central-difference estimate of d f / d x, perturbing x in place:
/// (f(x + h e_i) - f(x - h e_i)) / (2h). f is evaluated without recording.
Tensor fd_gradient(const std::function<double(const Tensor&)>& f, Tensor x, double step = 1e-6);

/// Relative error used throughout the gradient checks:
/// |a - n| / max(|a|, |n|, floor). Components whose magnitude is below
/// `floor` are compared on an absolute scale of `floor`.
double grad_rel_error(double analytic, double numeric, double floor = 1e-3);

struct GradCheckResult {
  double worst_rel_error = 0.0;
  std::string worst_location;
  std::size_t checked = 0;
};

/// Compares backward() of `loss_fn` against central differences for each
/// tensor in `wrt` (all must be leaves with requires_grad). At most
/// `max_elements_per_tensor` coordinates per tensor are probed, chosen
/// deterministically from `seed`; 0 probes every coordinate.
GradCheckResult check_gradients(const ScalarFn& loss_fn, std::vector<std::pair<std::string, Tensor>> wrt,
                                 double step = 1e-6, std::size_t max_elements_per_tensor = 0,
                                 std::uint64_t seed = 0);

}  // namespace normlab
