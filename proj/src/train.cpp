#include "dybnn/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "dybnn/error.hpp"
#include "dybnn/ops.hpp"
#include "dybnn/rng.hpp"

namespace dybnn::train {

namespace {

template <typename T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  const std::size_t classes = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const T* row = logits.ptr() + r * classes;
    const auto best = static_cast<std::int32_t>(std::max_element(row, row + classes) - row);
    if (best == labels[r]) ++correct;
  }
  return correct;
}

template <typename T>
void check_labels(const models::Model<T>& model, const Tensor<T>& input, std::span<const std::int32_t> labels) {
  if (input.rank() == 0 || labels.size() != input.dim(0)) {
    throw DimensionError("batch of " + std::to_string(input.rank() ? input.dim(0) : 0) + " inputs has " +
                         std::to_string(labels.size()) + " labels");
  }
  const auto classes = static_cast<std::int32_t>(model.graph().num_classes);
  for (std::int32_t l : labels) {
    if (l < 0 || l >= classes) throw ArgumentError("label " + std::to_string(l) + " outside [0, classes)");
  }
}

double loss_only(models::Model<double>& model, const Tensor<double>& input, std::span<const std::int32_t> labels,
                 const models::ForwardOptions& opts) {
  NoGradGuard guard;
  return ops::cross_entropy(model.forward(input, opts), labels).value()[0];
}

}  // namespace

template <typename T>
StepResult forward_backward(models::Model<T>& model, const Tensor<T>& input, std::span<const std::int32_t> labels,
                            const models::ForwardOptions& opts) {
  check_labels(model, input, labels);
  model.params().zero_grad();
  const Var<T> logits = model.forward(input, opts);
  const Var<T> loss = ops::cross_entropy(logits, labels);
  const double l = static_cast<double>(loss.value()[0]);
  if (!std::isfinite(l)) throw NumericFault(model.graph().layers.back().name, "non-finite loss");
  backward(loss);
  for (const auto& name : model.params().names()) {
    Var<T>& p = model.params().at(name);
    if (!p.has_grad()) p.node()->grad_buffer();
    if (!p.grad().all_finite()) throw NumericFault(name, "non-finite gradient");
  }
  return {l, count_correct(logits.value(), labels)};
}

template <typename T>
StepResult evaluate(models::Model<T>& model, const Tensor<T>& input, std::span<const std::int32_t> labels,
                    const models::ForwardOptions& opts) {
  check_labels(model, input, labels);
  NoGradGuard guard;
  const Var<T> logits = model.forward(input, opts);
  const double l = static_cast<double>(ops::cross_entropy(logits, labels).value()[0]);
  if (!std::isfinite(l)) throw NumericFault(model.graph().layers.back().name, "non-finite loss");
  return {l, count_correct(logits.value(), labels)};
}

FiniteDiffResult finite_diff_check(models::Model<double>& model, const Tensor<double>& input,
                                   std::span<const std::int32_t> labels, const ParamSelector& select,
                                   const FiniteDiffOptions& opts) {
  if (!(opts.eps > 0 && opts.eps <= 1e-2)) throw ArgumentError("finite difference eps must lie in (0, 1e-2]");
  std::vector<std::string> chosen;
  for (const auto& name : model.params().names()) {
    if (select(name)) chosen.push_back(name);
  }
  if (chosen.empty()) throw ArgumentError("finite difference selector matches no parameter");

  forward_backward(model, input, labels, opts.forward);
  FiniteDiffResult res;
  Rng rng(opts.seed);
  for (const auto& name : chosen) {
    Var<double>& p = model.params().at(name);
    const Tensor<double> analytic = p.grad();
    const std::size_t n = p.value().size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opts.max_entries && n > opts.max_entries) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(opts.max_entries);
    }
    for (std::size_t i : idx) {
      double& w = p.mutable_value()[i];
      const double saved = w;
      w = saved + opts.eps;
      const double up = loss_only(model, input, labels, opts.forward);
      w = saved - opts.eps;
      const double down = loss_only(model, input, labels, opts.forward);
      w = saved;
      const double central = (up - down) / (2 * opts.eps);
      const double a = analytic[i];
      const double err = std::abs(a - central) / std::max({std::abs(a), std::abs(central), 1e-12});
      ++res.checked;
      if (err > res.max_rel_error || res.worst_param.empty()) {
        res.max_rel_error = std::max(err, res.max_rel_error);
        res.worst_param = name;
        res.worst_index = i;
      }
    }
  }
  return res;
}

template <typename T>
SteMaskReport check_ste_masks(const Var<T>& output, std::uint64_t seed) {
  SteMaskReport rep;
  Rng rng(seed);
  std::vector<Node<T>*> stack{output.node()};
  std::unordered_set<Node<T>*> seen{output.node()};
  const auto& rule = GradRegistry<T>::instance().rule("sign_ste");
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    for (const auto& in : n->inputs) {
      if (seen.insert(in.get()).second) stack.push_back(in.get());
    }
    if (n->op != "sign_ste" || n->attrs.at(1) != 0.0) continue;
    const double clip = n->attrs.at(0);
    Node<T> replay;
    replay.value = n->value;
    replay.op = n->op;
    replay.attrs = n->attrs;
    auto input = std::make_shared<Node<T>>();
    input->value = n->inputs.at(0)->value;
    input->requires_grad = true;
    replay.inputs = {input};
    replay.grad = Tensor<T>(n->value.shape());
    for (auto& g : replay.grad.data()) g = static_cast<T>(rng.uniform(-1.0, 1.0));
    rule(replay);
    const Tensor<T>& got = input->grad_buffer();
    ++rep.sites;
    for (std::size_t i = 0; i < got.size(); ++i) {
      const bool pass = std::abs(static_cast<double>(input->value[i])) <= clip;
      const T expected = pass ? replay.grad[i] : T(0);
      ++rep.elements;
      if (got[i] != expected) ++rep.mismatches;
    }
  }
  return rep;
}

double linear_decay(double base_lr, std::uint64_t step, std::uint64_t total_steps) {
  if (total_steps == 0) return base_lr;
  const double f = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * std::max(0.0, f);
}

template <typename T>
void Adam<T>::step(models::ParamStore<T>& params, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& name : params.names()) {
    Var<T>& p = params.at(name);
    if (!p.has_grad()) continue;
    auto& m = m_.try_emplace(name, p.value().shape(), T(0)).first->second;
    auto& v = v_.try_emplace(name, p.value().shape(), T(0)).first->second;
    Tensor<T>& w = p.mutable_value();
    const Tensor<T>& g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1 - cfg_.beta1) * gi;
      const double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1 - cfg_.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double wi = static_cast<double>(w[i]) * (1 - lr * cfg_.weight_decay);
      w[i] = static_cast<T>(wi - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps));
    }
  }
}

#define DYBNN_INSTANTIATE(T)                                                                                    \
  template StepResult forward_backward<T>(models::Model<T>&, const Tensor<T>&, std::span<const std::int32_t>, \
                                          const models::ForwardOptions&);                                       \
  template StepResult evaluate<T>(models::Model<T>&, const Tensor<T>&, std::span<const std::int32_t>,         \
                                  const models::ForwardOptions&);                                               \
  template SteMaskReport check_ste_masks<T>(const Var<T>&, std::uint64_t);                                      \
  template class Adam<T>;

DYBNN_INSTANTIATE(float)
DYBNN_INSTANTIATE(double)
#undef DYBNN_INSTANTIATE

}  // namespace dybnn::train
