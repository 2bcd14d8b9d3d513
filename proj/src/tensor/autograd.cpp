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
#include "normlab/autograd.hpp"

namespace normlab {

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(const char* op, const Tensor& output, BackwardFn backward) {
  auto& impl = output.impl();
  impl->requires_grad = true;
  impl->is_leaf = false;
  impl->tape_epoch = epoch_;
  nodes_.push_back(Node{op, impl, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw AutogradError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw AutogradError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  auto& root = loss.impl();
  if (!root->requires_grad) {
    throw AutogradError("loss does not depend on any tensor that requires a gradient");
  }
  if (root->is_leaf) {
    root->accumulate_grad(std::vector<double>{1.0});
    return;
  }
  if (root->tape_epoch != epoch_) {
    throw AutogradError("backward invoked on a consumed tape");
  }

  root->grad.assign(1, 1.0);
  std::vector<double> flipped;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto& out = it->output;
    if (out->grad.empty()) continue;
    if (!fault_op_.empty() && fault_op_ == it->op) {
      flipped.assign(out->grad.begin(), out->grad.end());
      for (auto& v : flipped) v = -v;
      it->backward(flipped);
    } else {
      it->backward(out->grad);
    }
    // Intermediate adjoints are not retained.
    Buffer().swap(out->grad);
  }
  clear();
}

std::vector<std::string> Tape::recorded_ops() const {
  std::vector<std::string> out;
  out.reserve(nodes_.size());
  for (const auto& n : nodes_) out.emplace_back(n.op);
  return out;
}

void Tape::clear() {
  nodes_.clear();
  ++epoch_;
}

void backward(const Tensor& loss) { Tape::current().backward(loss); }

bool should_record(std::initializer_list<const Tensor*> operands) {
  if (!Tape::current().enabled()) return false;
  for (const Tensor* t : operands) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

}  // namespace normlab
