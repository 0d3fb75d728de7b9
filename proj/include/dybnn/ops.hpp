#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dybnn/autograd.hpp"

// Differentiable operations. Each records one graph node whose backward rule
// is registered under the op id given in the comment.
namespace dybnn::ops {

// How sign_ste routes gradients: `clip` is the hard-tanh STE used for
// training; `zero` is the true almost-everywhere derivative, used when
// comparing smooth paths against finite differences.
enum class SteBackward { clip, zero };

// "add", "sub", "mul": identical shapes.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);

// "add_bcast", "sub_bcast", "mul_bcast": t has x's rank, each extent equal
// to x's or 1; t is broadcast into x's shape.
template <typename T> Var<T> add_bcast(const Var<T>& x, const Var<T>& t);
template <typename T> Var<T> sub_bcast(const Var<T>& x, const Var<T>& t);
template <typename T> Var<T> mul_bcast(const Var<T>& x, const Var<T>& t);

// "scale": x * c for a constant c.
template <typename T> Var<T> scale(const Var<T>& x, double c);

// "matmul": [M,K] x [K,N].
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);

// "linear": x [R,K] times w^T, w [O,K] -> [R,O]. With packed=true both
// operands must be exactly +-1 and the product runs on the XNOR-popcount GEMM.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, bool packed = false);

// "bmm_nt": a [G,M,K], b [G,N,K] -> a b^T [G,M,N].
template <typename T> Var<T> bmm_nt(const Var<T>& a, const Var<T>& b, bool packed = false);
// "bmm_nn": a [G,M,N], b [G,N,K] -> [G,M,K].
template <typename T> Var<T> bmm_nn(const Var<T>& a, const Var<T>& b, bool packed = false);

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);  // "reshape"
template <typename T> Var<T> permute(const Var<T>& x, std::vector<std::size_t> perm);  // "permute"
template <typename T> Var<T> concat(const Var<T>& a, const Var<T>& b, std::size_t axis);  // "concat"

// "mean_keep": mean over `axes`, reduced extents kept as 1.
template <typename T> Var<T> mean_keep(const Var<T>& x, std::vector<std::size_t> axes);
template <typename T> Var<T> sum_all(const Var<T>& x);   // "sum_all" -> [1]
template <typename T> Var<T> mean_abs(const Var<T>& x);  // "mean_abs" -> [1]

template <typename T> Var<T> relu(const Var<T>& x);      // "relu"
template <typename T> Var<T> gelu(const Var<T>& x);      // "gelu" (erf form)
template <typename T> Var<T> hardtanh(const Var<T>& x);  // "hardtanh", clamp to [-1, 1]

// "sign_ste": +1 where x > 0, else -1.
template <typename T> Var<T> sign_ste(const Var<T>& x, SteBackward mode = SteBackward::clip, double clip = 1.0);

// Gradient of the straight-through estimator: upstream where |input| <= clip.
template <typename T>
Tensor<T> ste_sign_grad(const Tensor<T>& upstream, const Tensor<T>& saved_input, double clip);

template <typename T> Var<T> softmax_last(const Var<T>& x);  // "softmax"

// "cross_entropy": mean over rows of -log softmax(logits)[label].
template <typename T> Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> labels);

// "conv2d": x NCHW, w OIHW. pad_value fills the border (0 for real
// convolutions, -1 for the +-1 domain). packed requires +-1 operands.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::size_t stride, std::size_t padding, double pad_value = 0.0,
              bool packed = false);

template <typename T>
Var<T> maxpool2d(const Var<T>& x, std::size_t kernel, std::size_t stride, std::size_t padding);  // "maxpool2d"
template <typename T> Var<T> avgpool2d(const Var<T>& x, std::size_t kernel, std::size_t stride);  // "avgpool2d"

// "batchnorm2d": per-channel normalisation of NCHW input. In training mode
// batch statistics are used and the running buffers updated in place.
template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                   Tensor<T>& running_var, bool training, double momentum = 0.1, double eps = 1e-5);

// "layernorm": over the last dimension with affine gamma/beta of that extent.
template <typename T>
Var<T> layernorm_last(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = 1e-5);

// "prelu": x where x > 0, slope * x otherwise; slope broadcast into x.
template <typename T> Var<T> prelu(const Var<T>& x, const Var<T>& slope);

// True when every entry is exactly +1 or -1.
template <typename T> bool is_pm_one(const Tensor<T>& t);

namespace detail {
template <typename T> void register_core_rules(GradRegistry<T>& reg);
}

}  // namespace dybnn::ops
