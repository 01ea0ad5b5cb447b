#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <utility>
#include <vector>

#include "stnat/common.hpp"

namespace stnat {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream o;
  o << "(";
  for (std::size_t i = 0; i < s.size(); ++i) o << (i ? "x" : "") << s[i];
  o << ")";
  return o.str();
}

// Dense row-major tensor with an optional gradient buffer. Copies are
// shallow: a Tensor is a shared handle, so parameters can be held by a
// model, an optimizer, and a tape node at once.
template <class Real>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : p_(std::make_shared<Payload>()) {
    p_->shape = std::move(shape);
    p_->values.assign(shape_size(p_->shape), Real(0));
    p_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false)
      : p_(std::make_shared<Payload>()) {
    if (shape_size(shape) != values.size())
      throw ShapeError("tensor: " + shape_str(shape) + " cannot hold " +
                       std::to_string(values.size()) + " values");
    p_->shape = std::move(shape);
    p_->values = std::move(values);
    p_->requires_grad = requires_grad;
  }

  static Tensor scalar(Real v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  std::size_t rank() const { return p_->shape.size(); }
  std::size_t size() const { return p_->values.size(); }

  // Rank-2 conveniences (rank-1 tensors behave as a single row).
  std::size_t rows() const {
    return rank() >= 2 ? p_->shape[p_->shape.size() - 2] : 1;
  }
  std::size_t cols() const {
    return rank() >= 1 ? p_->shape.back() : 1;
  }

  std::vector<Real>& v() { return p_->values; }
  const std::vector<Real>& v() const { return p_->values; }

  Real& at(std::size_t r, std::size_t c) {
    return p_->values[r * cols() + c];
  }
  Real at(std::size_t r, std::size_t c) const {
    return p_->values[r * cols() + c];
  }

  bool requires_grad() const { return p_ && p_->requires_grad; }
  void set_requires_grad(bool b) { p_->requires_grad = b; }

  bool has_grad() const { return p_ && !p_->grad.empty(); }

  // Lazily allocated, zero-initialized; same shape as the values.
  std::vector<Real>& grad() {
    if (p_->grad.empty()) p_->grad.assign(p_->values.size(), Real(0));
    return p_->grad;
  }
  const std::vector<Real>& grad() const {
    return const_cast<Tensor*>(this)->grad();
  }

  void zero_grad() {
    if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), Real(0));
  }

  bool all_finite() const {
    for (Real x : p_->values)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  // Identity of the underlying storage (two handles to one payload compare
  // equal).
  const void* id() const { return p_.get(); }

 private:
  struct Payload {
    Shape shape;
    std::vector<Real> values;
    std::vector<Real> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Payload> p_;
};

// Dynamic tape: ops append a backward closure during the forward pass and
// backward() replays them in exact reverse order. Closures accumulate into
// input gradients, so a tensor consumed twice receives the sum of both
// adjoints.
template <class Real>
class Graph {
 public:
  bool recording = true;

  void record(std::function<void()> fn) {
    if (recording) tape_.push_back(std::move(fn));
  }

  std::size_t size() const { return tape_.size(); }
  void clear() { tape_.clear(); }

  void backward(Tensor<Real> loss) {
    if (!loss.defined() || loss.size() != 1)
      throw UsageError("backward: loss must be a defined scalar tensor");
    loss.grad()[0] += Real(1);  // seed adjoint
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> tape_;
};

}  // namespace stnat
