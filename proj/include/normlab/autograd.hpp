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

#include <functional>
#include <string>
#include <vector>

#include "normlab/tensor.hpp"

namespace normlab {

/// Adjoint rule of one recorded operation. Receives the gradient of the
/// operation's output and accumulates into its inputs.
using BackwardFn = std::function<void(std::span<const double> grad_out)>;

/// Define-by-run record of differentiable operations.
///
/// Each thread owns one tape (Tape::current()). Operations append a node when
/// at least one operand requires a gradient and recording is enabled. Nodes
/// are appended after their operands' producers, so reverse iteration is a
/// valid topological order. backward() consumes the tape.
class Tape {
 public:
  struct Node {
    const char* op;
    std::shared_ptr<detail::TensorImpl> output;
    BackwardFn backward;
  };

  static Tape& current();

  /// Records `output` as produced by `op`. Marks the output as a non-leaf
  /// tracked tensor.
  void record(const char* op, const Tensor& output, BackwardFn backward);

  /// Reverse pass from a scalar loss. Clears the tape afterwards.
  void backward(const Tensor& loss);

  /// Drops all recorded nodes without computing gradients.
  void clear();

  std::size_t size() const { return nodes_.size(); }
  /// Op names of the recorded nodes, in recording order.
  std::vector<std::string> recorded_ops() const;
  std::uint64_t epoch() const { return epoch_; }

  bool enabled() const { return enabled_; }
  void set_enabled(bool flag) { enabled_ = flag; }

  /// Flips the sign of the adjoint fed to every node recorded under `op`.
  /// Used by the gradient-check runner to show the checks catch a broken
  /// backward rule; empty string disables.
  void set_fault_injection(std::string op) { fault_op_ = std::move(op); }

 private:
  std::vector<Node> nodes_;
  std::uint64_t epoch_ = 1;
  bool enabled_ = true;
  std::string fault_op_;
};

/// Disables recording on the current thread's tape for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(Tape::current().enabled()) { Tape::current().set_enabled(false); }
  ~NoGradGuard() { Tape::current().set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Convenience wrapper for Tape::current().backward(loss).
void backward(const Tensor& loss);

/// True when an op over these operands should be recorded.
bool should_record(std::initializer_list<const Tensor*> operands);

}  // namespace normlab
