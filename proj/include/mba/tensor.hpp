#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mba {

using Index = std::int64_t;
using Shape = std::vector<Index>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

Index numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thread-local switch for graph recording. Inference paths and the
/// finite-difference probes in gradcheck run with recording disabled.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  // Empty until the node receives a gradient.
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Reads out.grad and accumulates into out.parents[i] that require grad.
  std::function<void(const TensorImpl& out)> backward_fn;

  std::span<T> grad_buffer();
  void accumulate_grad(std::span<const T> g);
};

/// Dense row-major tensor handle. Copies share storage; ops never mutate
/// their inputs, so a Tensor behaves as an immutable value except through
/// `mutable_data()`, which only optimizers and parameter loaders use.
template <typename T>
class Tensor {
 public:
  using Impl = TensorImpl<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T value, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value) { return from_data({1}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  Index dim() const { return static_cast<Index>(impl_->shape.size()); }
  Index extent(Index axis) const;
  Index numel() const { return static_cast<Index>(impl_->data.size()); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;
  T at(std::initializer_list<Index> idx) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad();

  /// Reverse-mode sweep from a single-element tensor. Leaf gradients
  /// accumulate across calls; interior gradients are rebuilt every call.
  void backward() const;

  /// Same values, no history.
  Tensor detach() const;
  Tensor clone() const;

  Impl* impl() const { return impl_.get(); }
  const std::shared_ptr<Impl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

extern template struct TensorImpl<float>;
extern template struct TensorImpl<double>;
extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace mba
