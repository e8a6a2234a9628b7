#include "dfa/tensor.hpp"

#include <cstdlib>

namespace dfa {

Buffer::Buffer(int64_t n, DType dt) : n_(n), dt_(dt) {
  if (n > 0) {
    size_t bytes = static_cast<size_t>(n) * dtype_size(dt);
    bytes = (bytes + 63) & ~size_t(63);
    void* p = std::aligned_alloc(64, bytes);
    if (!p) throw std::bad_alloc();
    std::memset(p, 0, bytes);
    mem_.reset(p);
  }
}

Buffer::Buffer(const Buffer& other) : Buffer(other.n_, other.dt_) {
  if (n_ > 0) std::memcpy(mem_.get(), other.mem_.get(), bytes().size());
}

Buffer& Buffer::operator=(const Buffer& other) {
  if (this != &other) *this = Buffer(other);
  return *this;
}

void Buffer::fill_zero() {
  if (n_ > 0) std::memset(mem_.get(), 0, bytes().size());
}

Tensor Tensor::zeros(Shape shape, DType dt) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data = Buffer(dfa::numel(shape), dt);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, DType dt, double value) {
  Tensor t = zeros(std::move(shape), dt);
  dispatch_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : t.data<T>()) v = static_cast<T>(value);
  });
  return t;
}

Tensor Tensor::from_values(Shape shape, DType dt, std::span<const double> values) {
  Tensor t = zeros(std::move(shape), dt);
  if (static_cast<int64_t>(values.size()) != t.numel())
    throw ShapeError("from_values: value count does not match shape");
  dispatch_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    for (size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::scalar_value(DType dt, double value) {
  return full({1}, dt, value);
}

double Tensor::value_at(int64_t i) const {
  return dispatch_dtype(dtype(), [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(impl_->data.data<T>()[i]);
  });
}

void Tensor::set_value_at(int64_t i, double v) {
  dispatch_dtype(dtype(), [&](auto tag) {
    using T = decltype(tag);
    impl_->data.data<T>()[i] = static_cast<T>(v);
  });
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
  return value_at(0);
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<size_t>(numel()));
  for (int64_t i = 0; i < numel(); ++i) out[static_cast<size_t>(i)] = value_at(i);
  return out;
}

double Tensor::grad_at(int64_t i) const {
  if (!has_grad()) throw NumericError("grad_at: no gradient buffer");
  return dispatch_dtype(dtype(), [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(impl_->grad.data<T>()[i]);
  });
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;  // deep copy
  return Tensor(std::move(impl));
}

Tensor Tensor::detached() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

int Tape::emit(std::shared_ptr<TensorImpl> out, std::function<void()> backward_fn) {
  nodes_.push_back({std::move(out), std::move(backward_fn)});
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::backward(const Tensor& root) {
  if (!root.defined()) throw NumericError("backward: undefined root");
  const auto& impl = root.impl();
  if (impl->numel() != 1)
    throw NumericError("backward: root must be scalar, got shape " + shape_str(impl->shape));
  if (impl->tape != this || !impl->on_tape())
    throw NumericError("backward: root was not produced on this tape");
  impl->ensure_grad();
  dispatch_dtype(impl->data.dtype(), [&](auto tag) {
    using T = decltype(tag);
    impl->grad.data<T>()[0] = T(1);
  });
  for (int i = impl->node; i >= 0; --i) {
    auto& node = nodes_[static_cast<size_t>(i)];
    // Nodes whose output never received a gradient are not ancestors of root.
    if (!node.out->grad.empty()) node.fn();
  }
}

}  // namespace dfa
