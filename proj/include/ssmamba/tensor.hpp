// SPDX-License-Identifier: Apache-2.0
//
// Dense tensor value with an optional gradient slot, plus the tape that
// records primitives for reverse-mode differentiation.
//
// A Tensor is a cheap handle to shared storage. Values are treated as
// immutable once an op has produced them; only parameters are updated in
// place, and only by the optimizer between forward passes.
//
// Recording is opt-in: an op appends to the tape that is active on the
// calling thread (see TapeGuard) when any input requires grad. With no active
// tape the same code runs as plain inference.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ssm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Error raised for incompatible shapes; the message names the op and dims.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <class T>
class Tape;

template <class T = float>
class Tensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (numel_of(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                       std::to_string(numel_of(shape)) + " elements, got " +
                       std::to_string(values.size()));
    }
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor scalar(T value) { return Tensor(Shape{1}, {value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  /// Direct write access. Reserved for parameter initialisation and updates.
  std::span<T> mutable_data() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor has shape " + shape_str(shape()));
    return impl_->data[0];
  }
  T operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  /// Gradient as a standalone tensor; zeros when backward never reached it.
  Tensor grad_tensor() const {
    if (!has_grad()) return zeros(shape());
    return Tensor(shape(), impl_->grad);
  }
  void zero_grad() const { impl_->grad.clear(); }

  /// Deep copy detached from any tape.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), impl_->data, requires_grad);
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  std::shared_ptr<Impl> impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<Impl> impl_;
};

/// Ordered record of executed primitives. Records are appended in execution
/// order, so every record's inputs were produced by an earlier record or are
/// leaves. One backward pass per tape.
template <class T = float>
class Tape {
 public:
  using Impl = detail::TensorImpl<T>;
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string op, std::shared_ptr<Impl> output, BackwardFn fn) {
    if (consumed_) throw std::logic_error("tape: recording after backward (" + op + ")");
    records_.push_back({std::move(op), std::move(output), std::move(fn)});
  }

  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }
  const std::string& op_name(std::size_t i) const { return records_.at(i).op; }

  /// Propagates d(loss)/d(node) into every node reachable backwards from
  /// loss. Leaf gradients accumulate across tapes until zero_grad().
  void backward(const Tensor<T>& loss) {
    if (consumed_) throw std::logic_error("tape: backward called twice on the same tape");
    if (!loss.defined() || loss.numel() != 1) {
      throw ShapeError("backward: loss must be a single-element tensor");
    }
    std::size_t end = records_.size();
    while (end > 0 && records_[end - 1].output != loss.impl()) --end;
    if (end == 0) throw std::logic_error("backward: loss was not produced on this tape");
    consumed_ = true;
    loss.impl()->grad_buffer()[0] += T(1);
    for (std::size_t i = end; i-- > 0;) {
      if (records_[i].output->grad.empty()) continue;  // unreachable from loss
      records_[i].backward();
    }
    records_.clear();
  }

 private:
  struct Record {
    std::string op;
    std::shared_ptr<Impl> output;
    BackwardFn backward;
  };
  std::vector<Record> records_;
  bool consumed_ = false;
};

namespace detail {
template <class T>
inline thread_local Tape<T>* current_tape = nullptr;
}

template <class T>
Tape<T>* active_tape() {
  return detail::current_tape<T>;
}

/// Makes `tape` the recording target on this thread for the guard's lifetime.
template <class T>
class TapeGuard {
 public:
  explicit TapeGuard(Tape<T>& tape) : prev_(detail::current_tape<T>) {
    detail::current_tape<T> = &tape;
  }
  ~TapeGuard() { detail::current_tape<T> = prev_; }
  TapeGuard(const TapeGuard&) = delete;
  TapeGuard& operator=(const TapeGuard&) = delete;

 private:
  Tape<T>* prev_;
};

/// Suspends recording, e.g. for evaluation inside a training loop.
template <class T>
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::current_tape<T>) { detail::current_tape<T> = nullptr; }
  ~NoGradGuard() { detail::current_tape<T> = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<T>* prev_;
};

/// Convenience for the common "one forward, one backward" pattern.
template <class T>
void backward(const Tensor<T>& loss) {
  auto* tape = active_tape<T>();
  if (!tape) throw std::logic_error("backward: no active tape");
  tape->backward(loss);
}

}  // namespace ssm
