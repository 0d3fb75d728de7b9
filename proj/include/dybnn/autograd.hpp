#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "dybnn/tensor.hpp"

namespace dybnn {

// One vertex of the dynamic graph. Leaves have an empty op id.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> inputs;
  std::vector<Tensor<T>> saved;
  std::vector<double> attrs;
  std::vector<std::int64_t> aux;

  // Gradient buffer of matching shape, zero-filled on first access.
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape(), T(0));
    return grad;
  }
};

template <typename T>
using BackwardFn = std::function<void(Node<T>&)>;

// Op id -> backward rule. Every op that records a graph node must have exactly
// one rule here; recording an op without a rule throws.
template <typename T>
class GradRegistry {
 public:
  static GradRegistry& instance();

  void add(const std::string& op_id, BackwardFn<T> fn);
  const BackwardFn<T>& rule(const std::string& op_id) const;
  bool contains(const std::string& op_id) const { return rules_.count(op_id) != 0; }
  std::vector<std::string> op_ids() const;

 private:
  GradRegistry();
  std::unordered_map<std::string, BackwardFn<T>> rules_;
};

// Handle to a graph node; cheap to copy.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<T>(); }
  const std::string& op() const { return node_->op; }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Gradient recording switch (thread-local).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Records `value` as the output of `op` applied to `inputs`. When recording is
// off or no input needs a gradient the result is a constant leaf.
template <typename T>
Var<T> record(const std::string& op, Tensor<T> value, std::vector<Var<T>> inputs,
              std::vector<Tensor<T>> saved = {}, std::vector<double> attrs = {},
              std::vector<std::int64_t> aux = {});

// Reverse sweep from a scalar (or seeded) output, accumulating into every
// reachable node with requires_grad.
template <typename T>
void backward(const Var<T>& output);

template <typename T>
void backward(const Var<T>& output, const Tensor<T>& seed);

}  // namespace dybnn
