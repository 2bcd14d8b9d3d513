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

#include <cstddef>
#include <cstdint>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace normlab {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible shapes, bad axes, mismatched dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, division by zero, diverged training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the autograd tape (non-scalar loss, consumed tape).
class AutogradError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

/// Allocates on 64-byte boundaries so SIMD kernels take the same code path,
/// and hence reduce in the same order, on every run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t tape_epoch = 0;  // epoch of the tape that produced this value

  void accumulate_grad(std::span<const double> g);
  std::span<double> grad_buffer();
};
}  // namespace detail

/// Dense row-major array of 64-bit reals with 1 to 4 axes.
///
/// Tensor is a shared handle: copies alias the same storage, as in most
/// define-by-run frameworks. Use clone() for a deep copy. Feature maps use
/// axis order N, C, H, W.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);
  static Tensor from_buffer(Shape shape, Buffer data);

  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Writable view. Only valid on leaves; mutating a recorded value would
  /// invalidate the tape.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag = true);
  bool is_leaf() const;

  /// Accumulated adjoint; empty span when none has been accumulated.
  std::span<const double> grad() const;
  bool has_grad() const;
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;

  std::string to_json() const;
  static Tensor from_json(const std::string& text);

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

void check_finite(std::span<const double> values, const std::string& what);

}  // namespace normlab
