#pragma once

#include <cstddef>

#include "dybnn/autograd.hpp"
#include "dybnn/bitkernel.hpp"
#include "dybnn/ops.hpp"

// Activation and weight binarizers: Sign, RSign, DySign (channel- and
// token-wise), RPReLU / DyPReLU, zero-mean scaled weight binarization and the
// shifted post-softmax attention binarizer.
namespace dybnn::binarizers {

// Behaviour of every sign site in one forward pass.
struct BinarizeOptions {
  // Forward computes hard-tanh instead of sign, making the network
  // differentiable with derivative equal to the STE surrogate.
  bool surrogate = false;
  ops::SteBackward ste = ops::SteBackward::clip;
  double clip = 1.0;

  bool exact() const { return !surrogate; }
};

enum class ThresholdMode { channel, token };

// Width of the squeeze layer: max(1, round(C / gamma)).
std::size_t squeeze_width(std::size_t channels, std::size_t gamma);

// GAP -> FC -> (GELU) -> FC. w1 is [hidden, C], w2 is [C, hidden]; no biases.
template <typename T>
struct Hyperfunction {
  Var<T> w1;
  Var<T> w2;
  bool use_gelu = false;

  std::size_t channels() const { return w1.dim(1); }
  std::size_t hidden() const { return w1.dim(0); }

  // g: [B, C] statistics -> [B, C] outputs.
  Var<T> operator()(const Var<T>& g) const;
};

template <typename T>
struct DySignParams {
  Hyperfunction<T> hyper;
  std::size_t gamma = 16;
  ThresholdMode mode = ThresholdMode::channel;
};

// Static shifted PReLU (dynamic == false) or the input-conditioned variant
// whose shifts come from two hyperfunctions over GAP(X).
template <typename T>
struct PReLUParams {
  Var<T> beta;         // [C], static slope
  Var<T> gamma_shift;  // [C], static mode only
  Var<T> zeta_shift;   // [C], static mode only
  bool dynamic = false;
  Hyperfunction<T> gamma_hyper;
  Hyperfunction<T> zeta_hyper;
};

template <typename T>
struct BinaryWeightMeta {
  T alpha_w = 0;
  T u = 0;
  bitkernel::PackedBitMatrix packed;
};

// +1 where x > 0, else -1 (or hard-tanh in surrogate mode).
template <typename T>
Var<T> sign(const Var<T>& x, const BinarizeOptions& opts = {});

// Per-channel static thresholds `a` (length C) along `axis` of x:
// sign(x - a_i). NCHW uses axis 1; tokens [B,N,D] use 1 (token) or 2 (channel).
template <typename T>
Var<T> rsign(const Var<T>& x, const Var<T>& a, std::size_t axis, const BinarizeOptions& opts = {});

// Threshold vector per sample, [B, C] (channel) or [B, N] (token).
// x is NCHW (channel mode only) or [B, N, D].
template <typename T>
Var<T> dysign_thresholds(const Var<T>& x, const DySignParams<T>& p);

// sign(x - alpha) with alpha broadcast over spatial positions (channel mode)
// or over the embedding dimension (token mode).
template <typename T>
Var<T> dysign(const Var<T>& x, const DySignParams<T>& p, const BinarizeOptions& opts = {});

// Same as dysign, also returning the thresholds it used.
template <typename T>
Var<T> dysign(const Var<T>& x, const DySignParams<T>& p, const BinarizeOptions& opts, Var<T>* thresholds);

// Shifted PReLU on NCHW input:  x - g + z  if x > g,  beta (x - g) + z  otherwise.
template <typename T>
Var<T> rprelu(const Var<T>& x, const PReLUParams<T>& p);

// Dynamic variant: g and z generated per sample from GAP(x). Falls back to
// rprelu when p.dynamic is false.
template <typename T>
Var<T> dyprelu(const Var<T>& x, const PReLUParams<T>& p);

// Scale, mean and packed signs of W - mean(W). A matrix or higher-rank W is
// viewed as [dim(0), size / dim(0)]; a vector as a single row.
template <typename T>
BinaryWeightMeta<T> binarize_weights(const Tensor<T>& w);

// Differentiable sign(W - mean(W)).
template <typename T>
Var<T> binary_weight(const Var<T>& w, const BinarizeOptions& opts = {});

// alpha_w * (xb (x) sign(W - u)^T) for +-1 input rows xb [R, K] and W [O, K].
// With binary_weights == false the real-valued W is used unscaled.
template <typename T>
Var<T> binary_linear(const Var<T>& xb, const Var<T>& w, const BinarizeOptions& opts = {}, bool binary_weights = true);

// sign(P - s) for post-softmax attention P [..., N, N] (rows must sum to 1
// within 1e-5) and a shift s broadcast into P.
template <typename T>
Var<T> shifted_attention_sign(const Var<T>& p, const Var<T>& s, const BinarizeOptions& opts = {});

}  // namespace dybnn::binarizers
