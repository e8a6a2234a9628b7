#pragma once

// Dense tensors on a reverse-mode tape. A Tensor is a cheap value-like handle
// to shared storage; ops (see ops.hpp) record backward closures on an
// explicit Tape. One tape per training step, single-threaded; tensors may be
// moved freely between threads as long as two tapes never share storage.

#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dfa/common.hpp"

namespace dfa {

class Tape;

// Flat 64-byte-aligned buffer of f32 or f64 elements.
class Buffer {
 public:
  Buffer() = default;
  Buffer(int64_t n, DType dt);  // zero-initialized
  Buffer(const Buffer& other);
  Buffer& operator=(const Buffer& other);
  Buffer(Buffer&&) noexcept = default;
  Buffer& operator=(Buffer&&) noexcept = default;

  int64_t size() const { return n_; }
  bool empty() const { return n_ == 0; }
  DType dtype() const { return dt_; }

  template <class T>
  T* data() {
    return static_cast<T*>(mem_.get());
  }
  template <class T>
  const T* data() const {
    return static_cast<const T*>(mem_.get());
  }

  std::span<std::byte> bytes() {
    return {static_cast<std::byte*>(mem_.get()), static_cast<size_t>(n_) * dtype_size(dt_)};
  }
  std::span<const std::byte> bytes() const {
    return {static_cast<const std::byte*>(mem_.get()),
            static_cast<size_t>(n_) * dtype_size(dt_)};
  }

  void fill_zero();
  void reset() { mem_.reset(); n_ = 0; }

 private:
  struct Free {
    void operator()(void* p) const { std::free(p); }
  };
  std::unique_ptr<void, Free> mem_;
  int64_t n_ = 0;
  DType dt_ = DType::f64;
};

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until first accumulation
  bool requires_grad = false;
  Tape* tape = nullptr;  // producing tape, when the tensor is an op output
  int node = -1;

  int64_t numel() const { return data.size(); }
  bool on_tape() const { return node >= 0; }
  void ensure_grad() {
    if (grad.empty()) grad = Buffer(data.size(), data.dtype());
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, DType dt);
  static Tensor full(Shape shape, DType dt, double value);
  static Tensor from_values(Shape shape, DType dt, std::span<const double> values);
  static Tensor scalar_value(DType dt, double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  DType dtype() const { return impl_->data.dtype(); }
  int64_t numel() const { return impl_->numel(); }
  int64_t dim(size_t i) const { return impl_->shape[i]; }
  size_t ndim() const { return impl_->shape.size(); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  template <class T>
  std::span<T> data() {
    return {impl_->data.data<T>(), static_cast<size_t>(numel())};
  }
  template <class T>
  std::span<const T> data() const {
    return {impl_->data.data<T>(), static_cast<size_t>(numel())};
  }

  // dtype-agnostic element access (tests, metrics, serialization)
  double value_at(int64_t i) const;
  void set_value_at(int64_t i, double v);
  double item() const;  // value of a 1-element tensor
  std::vector<double> to_vector() const;

  bool has_grad() const { return !impl_->grad.empty(); }
  template <class T>
  std::span<const T> grad() const {
    return {impl_->grad.data<T>(), static_cast<size_t>(numel())};
  }
  double grad_at(int64_t i) const;
  void zero_grad() { impl_->grad.reset(); }

  // Deep copy of values; the copy is a plain leaf (no tape, no grad).
  Tensor clone() const;
  // Same storage, fresh identity off the tape. Used to freeze a value.
  Tensor detached() const;

  std::span<const std::byte> raw_bytes() const { return impl_->data.bytes(); }
  std::span<std::byte> raw_bytes_mut() { return impl_->data.bytes(); }
  uint64_t checksum() const { return fnv1a64(impl_->data.bytes()); }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Record of executed differentiable ops. Nodes are appended in execution
// order (so inputs always precede consumers); backward() walks them exactly
// once in reverse from the root.
class Tape {
 public:
  int emit(std::shared_ptr<TensorImpl> out, std::function<void()> backward_fn);

  // Populates grad buffers of every requires_grad leaf reachable from root.
  // root must be a scalar produced on this tape.
  void backward(const Tensor& root);

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    std::shared_ptr<TensorImpl> out;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
};

template <class F>
decltype(auto) dispatch_dtype(DType dt, F&& f) {
  if (dt == DType::f32) return f(float{});
  return f(double{});
}

}  // namespace dfa
