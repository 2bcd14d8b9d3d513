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
#include <memory>
#include <string>
#include <vector>

#include "normlab/layers.hpp"

namespace normlab {

/// Updates parameters in place from their accumulated gradients. A parameter
/// without a gradient is treated as having a zero gradient. A non-finite
/// gradient throws NumericalError naming the parameter, before any parameter
/// is modified.
class Optimizer {
 public:
  explicit Optimizer(NamedTensors params);
  virtual ~Optimizer() = default;

  virtual void step() = 0;
  void zero_grad();

  const NamedTensors& params() const { return params_; }
  std::uint64_t steps() const { return steps_; }

 protected:
  void check_gradients() const;

  NamedTensors params_;
  std::uint64_t steps_ = 0;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-5;
};

/// m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
/// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
class Adam final : public Optimizer {
 public:
  Adam(NamedTensors params, AdamOptions options = {});
  void step() override;

  const AdamOptions& options() const { return opt_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  AdamOptions opt_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

struct SgdOptions {
  double lr = 1e-2;
  double momentum = 0.9;
};

/// u <- momentum u + g;  p <- p - lr u
class Sgd final : public Optimizer {
 public:
  Sgd(NamedTensors params, SgdOptions options = {});
  void step() override;

 private:
  SgdOptions opt_;
  std::vector<std::vector<double>> u_;
};

}  // namespace normlab
