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

#include <string>
#include <vector>

namespace normlab {

struct ComponentCheck {
  std::string suite;  // ops | norm | models
  std::string name;
  double worst_rel_error = 0.0;
  std::string worst_location;
  std::size_t checked = 0;
  bool passed = false;
};

struct GradcheckReport {
  double tolerance = 1e-4;
  std::vector<ComponentCheck> components;
  std::vector<std::string> covered_ops;    // registry ops exercised by the ops suite
  std::vector<std::string> uncovered_ops;  // registry ops without a passing recording
  bool ops_suite_ran = false;

  bool passed() const;
  /// One line per component, then a coverage line and a verdict.
  std::string format() const;
};

/// Runs the finite-difference suites selected by `scope` (all, ops, norm or
/// models). A non-empty `inject_fault` flips the sign of that op's backward
/// rule for the duration of the run.
GradcheckReport run_gradcheck(const std::string& scope, double tolerance = 1e-4, const std::string& inject_fault = "");

}  // namespace normlab
