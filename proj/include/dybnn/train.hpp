#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>

#include "dybnn/models.hpp"

namespace dybnn::train {

struct StepResult {
  double loss = 0;
  std::size_t correct = 0;
};

// Cross-entropy forward and backward; every parameter receives a gradient of
// its own shape (zero where it has no influence). Gradients are reset first.
template <typename T>
StepResult forward_backward(models::Model<T>& model, const Tensor<T>& input, std::span<const std::int32_t> labels,
                            const models::ForwardOptions& opts);

// Cross-entropy loss and correct-prediction count without gradients.
template <typename T>
StepResult evaluate(models::Model<T>& model, const Tensor<T>& input, std::span<const std::int32_t> labels,
                    const models::ForwardOptions& opts = {});

using ParamSelector = std::function<bool(const std::string&)>;

struct FiniteDiffOptions {
  double eps = 1e-6;
  // Entries checked per parameter tensor (sampled); 0 checks every entry.
  std::size_t max_entries = 8;
  std::uint64_t seed = 0;
  models::ForwardOptions forward;
};

struct FiniteDiffResult {
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

// max over selected scalar entries of |analytic - central| /
// max(|analytic|, |central|, 1e-12). ArgumentError when the selector matches
// nothing or eps is outside (0, 1e-2].
FiniteDiffResult finite_diff_check(models::Model<double>& model, const Tensor<double>& input,
                                   std::span<const std::int32_t> labels, const ParamSelector& select,
                                   const FiniteDiffOptions& opts = {});

struct SteMaskReport {
  std::size_t sites = 0;
  std::size_t elements = 0;
  std::size_t mismatches = 0;
};

// Replays the backward rule of every sign node reachable from `output` with a
// random upstream gradient and compares against the |x| <= clip mask.
template <typename T>
SteMaskReport check_ste_masks(const Var<T>& output, std::uint64_t seed = 0);

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0;
};

// lr * (1 - step / total_steps), never below zero.
double linear_decay(double base_lr, std::uint64_t step, std::uint64_t total_steps);

template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // One update of every parameter that has a gradient, at learning rate lr.
  void step(models::ParamStore<T>& params, double lr);

  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  std::map<std::string, Tensor<T>>& first_moments() { return m_; }
  std::map<std::string, Tensor<T>>& second_moments() { return v_; }
  const std::map<std::string, Tensor<T>>& first_moments() const { return m_; }
  const std::map<std::string, Tensor<T>>& second_moments() const { return v_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, Tensor<T>> m_;
  std::map<std::string, Tensor<T>> v_;
};

}  // namespace dybnn::train
