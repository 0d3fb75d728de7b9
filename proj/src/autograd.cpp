#include "dybnn/autograd.hpp"

#include <algorithm>
#include <unordered_set>

#include "dybnn/ops.hpp"

namespace dybnn {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
GradRegistry<T>::GradRegistry() {
  ops::detail::register_core_rules<T>(*this);
}

template <typename T>
GradRegistry<T>& GradRegistry<T>::instance() {
  static GradRegistry registry;
  return registry;
}

template <typename T>
void GradRegistry<T>::add(const std::string& op_id, BackwardFn<T> fn) {
  if (!rules_.emplace(op_id, std::move(fn)).second) {
    throw ArgumentError("gradient rule for op '" + op_id + "' registered twice");
  }
}

template <typename T>
const BackwardFn<T>& GradRegistry<T>::rule(const std::string& op_id) const {
  auto it = rules_.find(op_id);
  if (it == rules_.end()) throw ArgumentError("no gradient rule registered for op '" + op_id + "'");
  return it->second;
}

template <typename T>
std::vector<std::string> GradRegistry<T>::op_ids() const {
  std::vector<std::string> ids;
  ids.reserve(rules_.size());
  for (const auto& [k, v] : rules_) ids.push_back(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

template <typename T>
Var<T> record(const std::string& op, Tensor<T> value, std::vector<Var<T>> inputs, std::vector<Tensor<T>> saved,
              std::vector<double> attrs, std::vector<std::int64_t> aux) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  const bool any_grad =
      grad_enabled() && std::any_of(inputs.begin(), inputs.end(), [](const Var<T>& v) { return v.requires_grad(); });
  if (!any_grad) return Var<T>(std::move(node));
  if (!GradRegistry<T>::instance().contains(op)) {
    throw ArgumentError("op '" + op + "' has no registered gradient rule");
  }
  node->requires_grad = true;
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (auto& in : inputs) node->inputs.push_back(in.shared());
  node->saved = std::move(saved);
  node->attrs = std::move(attrs);
  node->aux = std::move(aux);
  return Var<T>(std::move(node));
}

template <typename T>
void backward(const Var<T>& output, const Tensor<T>& seed) {
  require_same_shape(output.shape(), seed.shape(), "backward seed");
  if (!output.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{output.node(), 0}};
  visited.insert(output.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  auto& seed_buf = output.node()->grad_buffer();
  for (std::size_t i = 0; i < seed.size(); ++i) seed_buf[i] += seed[i];
  const auto& reg = GradRegistry<T>::instance();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->op.empty() || n->grad.empty()) continue;
    reg.rule(n->op)(*n);
  }
}

template <typename T>
void backward(const Var<T>& output) {
  if (output.value().size() != 1) {
    throw DimensionError("backward() without a seed needs a scalar output, got " + shape_str(output.shape()));
  }
  backward(output, Tensor<T>::scalar(T(1)));
}

template class GradRegistry<float>;
template class GradRegistry<double>;
template Var<float> record<float>(const std::string&, Tensor<float>, std::vector<Var<float>>,
                                  std::vector<Tensor<float>>, std::vector<double>, std::vector<std::int64_t>);
template Var<double> record<double>(const std::string&, Tensor<double>, std::vector<Var<double>>,
                                    std::vector<Tensor<double>>, std::vector<double>, std::vector<std::int64_t>);
template void backward<float>(const Var<float>&, const Tensor<float>&);
template void backward<double>(const Var<double>&, const Tensor<double>&);
template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);

}  // namespace dybnn
