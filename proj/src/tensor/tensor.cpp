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
#include "normlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace normlab {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void check_finite(std::span<const double> values, const std::string& what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericalError("non-finite value " + std::to_string(values[i]) + " at index " +
                           std::to_string(i) + " in " + what);
    }
  }
}

namespace detail {

void TensorImpl::accumulate_grad(std::span<const double> g) {
  auto buf = grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

std::span<double> TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 4) {
    throw ShapeError("tensor rank must be 1..4, got shape " + shape_str(shape));
  }
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> data)
    : Tensor(from_buffer(std::move(shape), Buffer(data.begin(), data.end()))) {}

Tensor Tensor::from_buffer(Shape shape, Buffer data) {
  validate_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " elements, got " + std::to_string(data.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }
Tensor Tensor::ones(const Shape& shape) { return full(shape, 1.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  validate_shape(shape);
  return from_buffer(shape, Buffer(shape_numel(shape), value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw Error("use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  if (!impl_) throw Error("use of undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw Error("use of undefined tensor");
  if (!impl_->is_leaf) throw AutogradError("cannot mutate a recorded (non-leaf) tensor in place");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw Error("use of undefined tensor");
  if (!impl_->is_leaf) throw AutogradError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return !impl_ || impl_->is_leaf; }

std::span<const double> Tensor::grad() const {
  if (!impl_) return {};
  return impl_->grad;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const {
  if (!impl_) return {};
  return from_buffer(impl_->shape, impl_->data);
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  if (t.defined()) t.impl_->requires_grad = impl_->is_leaf && impl_->requires_grad;
  return t;
}

std::string Tensor::to_json() const {
  nlohmann::json j;
  j["shape"] = shape();
  j["data"] = std::vector<double>(data().begin(), data().end());
  return j.dump();
}

Tensor Tensor::from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

}  // namespace normlab
