#pragma once

#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mkfa/tensor.hpp"

namespace mkfa {

/// A value on (or feeding) a tape, with its accumulated gradient.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something is accumulated
  bool requires_grad = false;

  bool has_grad() const { return !grad.empty(); }

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }

  void accumulate(const Tensor<T>& g) {
    Tensor<T>& dst = grad_buffer();
    T* d = dst.ptr();
    const T* s = g.ptr();
    for (int64_t i = 0, n = dst.numel(); i < n; ++i) d[i] += s[i];
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

/// Ordered record of differentiable op applications. backward() replays the
/// recorded vector-Jacobian products in strict reverse order.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Input that takes no gradient.
  Var<T> constant(Tensor<T> value) const {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return node;
  }

  /// Leaf whose gradient is accumulated (and kept) across backward passes.
  Var<T> variable(Tensor<T> value) const {
    auto node = std::make_shared<Node<T>>();
    node->grad = Tensor<T>(value.shape());
    node->value = std::move(value);
    node->requires_grad = true;
    return node;
  }

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  /// True when an op over these inputs must be recorded.
  template <typename... Vars>
  bool needs_grad(const Vars&... inputs) const {
    return grad_enabled_ && ((inputs && inputs->requires_grad) || ...);
  }

  /// Wraps an op result. `op` names the producer in error messages.
  Var<T> emit(Tensor<T> value, bool requires_grad, const char* op) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    if (requires_grad) produced_.push_back(node);
    return node;
  }

  void record(std::function<void()> vjp) { ops_.push_back(std::move(vjp)); }

  size_t size() const { return ops_.size(); }

  /// Seeds d(output)/d(output) = 1 and propagates. Intermediate gradients are
  /// reset first, leaves accumulate.
  void backward(const Var<T>& output) {
    if (!output) throw std::invalid_argument("backward: null output");
    if (output->value.numel() != 1) {
      throw ShapeError("backward: output must be scalar, got shape " +
                       output->value.shape().str());
    }
    if (ops_.empty() || !output->requires_grad) {
      throw std::logic_error("backward: output was not produced by a recorded forward pass");
    }
    for (auto& node : produced_) {
      if (node->has_grad()) node->grad.fill(T(0));
    }
    output->grad_buffer()[0] = T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void clear() {
    ops_.clear();
    produced_.clear();
  }

 private:
  std::vector<std::function<void()>> ops_;
  std::vector<Var<T>> produced_;
  bool grad_enabled_ = true;
};

/// Named learned tensor. The gradient lives on the underlying node.
template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;
  bool trainable = true;

  Tensor<T>& value() { return var->value; }
  const Tensor<T>& value() const { return var->value; }
  Tensor<T>& grad() { return var->grad_buffer(); }
  void zero_grad() { var->grad_buffer().fill(T(0)); }
};

/// Registry of parameters in creation order; names are unique.
template <typename T>
class ParamRegistry {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> init, bool trainable = true) {
    if (index_.count(name) != 0) throw std::invalid_argument("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->var = std::make_shared<Node<T>>();
    p->var->grad = Tensor<T>(init.shape());
    p->var->value = std::move(init);
    p->var->requires_grad = trainable;
    p->trainable = trainable;
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  Parameter<T>& at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw std::out_of_range("unknown parameter: " + name);
  }

  size_t size() const { return params_.size(); }
  Parameter<T>& operator[](size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](size_t i) const { return *params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  int64_t total_elements() const {
    int64_t total = 0;
    for (const auto& p : params_) total += p->value().numel();
    return total;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, size_t> index_;
};

}  // namespace mkfa
