#include "dybnn/binarizers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dybnn::binarizers {

namespace {

// Shape that broadcasts a length-C vector along `axis` of `xs`, optionally
// keeping the batch extent (per-sample thresholds).
Shape vector_bcast_shape(const Shape& xs, std::size_t axis, bool per_sample) {
  Shape s(xs.size(), 1);
  s[axis] = xs[axis];
  if (per_sample) s[0] = xs[0];
  return s;
}

template <typename T>
Var<T> gap(const Var<T>& x, ThresholdMode mode) {
  const Shape& xs = x.shape();
  if (xs.size() == 4) {
    if (mode != ThresholdMode::channel) throw DimensionError("token-wise thresholds need [B, N, D] input");
    return ops::reshape(ops::mean_keep(x, {2, 3}), Shape{xs[0], xs[1]});
  }
  if (xs.size() == 3) {
    if (mode == ThresholdMode::token) return ops::reshape(ops::mean_keep(x, {2}), Shape{xs[0], xs[1]});
    return ops::reshape(ops::mean_keep(x, {1}), Shape{xs[0], xs[2]});
  }
  throw DimensionError("dysign expects NCHW or [B, N, D] input, got " + shape_str(xs));
}

std::size_t threshold_axis(std::size_t rank, ThresholdMode mode) {
  return (rank == 3 && mode == ThresholdMode::channel) ? 2 : 1;
}

template <typename T>
void check_hyper(const Hyperfunction<T>& h, std::size_t c) {
  if (!h.w1.defined() || !h.w2.defined()) throw ArgumentError("hyperfunction weights not initialised");
  if (h.w1.dim(1) != c || h.w2.dim(0) != c || h.w2.dim(1) != h.w1.dim(0)) {
    throw DimensionError("hyperfunction shapes " + shape_str(h.w1.shape()) + ", " + shape_str(h.w2.shape()) +
                         " do not serve " + std::to_string(c) + " channels");
  }
}

}  // namespace

std::size_t squeeze_width(std::size_t channels, std::size_t gamma) {
  if (gamma == 0) throw ArgumentError("reduction ratio must be positive");
  const auto w = static_cast<std::size_t>(std::llround(static_cast<double>(channels) / static_cast<double>(gamma)));
  return w < 1 ? 1 : w;
}

template <typename T>
Var<T> Hyperfunction<T>::operator()(const Var<T>& g) const {
  check_hyper(*this, g.dim(1));
  Var<T> h = ops::linear(g, w1);
  if (use_gelu) h = ops::gelu(h);
  return ops::linear(h, w2);
}

template <typename T>
Var<T> sign(const Var<T>& x, const BinarizeOptions& opts) {
  if (opts.surrogate) return ops::hardtanh(x);
  return ops::sign_ste(x, opts.ste, opts.clip);
}

template <typename T>
Var<T> rsign(const Var<T>& x, const Var<T>& a, std::size_t axis, const BinarizeOptions& opts) {
  if (axis >= x.value().rank() || a.value().size() != x.dim(axis)) {
    throw DimensionError("rsign: " + std::to_string(a.value().size()) + " thresholds for input " + shape_str(x.shape()) +
                         " along axis " + std::to_string(axis));
  }
  const Var<T> t = ops::reshape(a, vector_bcast_shape(x.shape(), axis, false));
  return sign(ops::sub_bcast(x, t), opts);
}

template <typename T>
Var<T> dysign_thresholds(const Var<T>& x, const DySignParams<T>& p) {
  const Var<T> g = gap(x, p.mode);
  return p.hyper(g);
}

template <typename T>
Var<T> dysign(const Var<T>& x, const DySignParams<T>& p, const BinarizeOptions& opts, Var<T>* thresholds) {
  const Var<T> alpha = dysign_thresholds(x, p);
  if (thresholds) *thresholds = alpha;
  const std::size_t axis = threshold_axis(x.value().rank(), p.mode);
  const Var<T> t = ops::reshape(alpha, vector_bcast_shape(x.shape(), axis, true));
  return sign(ops::sub_bcast(x, t), opts);
}

template <typename T>
Var<T> dysign(const Var<T>& x, const DySignParams<T>& p, const BinarizeOptions& opts) {
  return dysign<T>(x, p, opts, static_cast<Var<T>*>(nullptr));
}

template <typename T>
Var<T> rprelu(const Var<T>& x, const PReLUParams<T>& p) {
  if (x.value().rank() != 4 || p.beta.value().size() != x.dim(1)) {
    throw DimensionError("rprelu: parameters for " + std::to_string(p.beta.value().size()) + " channels, input " +
                         shape_str(x.shape()));
  }
  const Shape cs = vector_bcast_shape(x.shape(), 1, false);
  const Var<T> beta = ops::reshape(p.beta, cs);
  if (p.dynamic) {
    const Var<T> g = gap(x, ThresholdMode::channel);
    const Shape ps = vector_bcast_shape(x.shape(), 1, true);
    const Var<T> gs = ops::reshape(p.gamma_hyper(g), ps);
    const Var<T> zs = ops::reshape(p.zeta_hyper(g), ps);
    return ops::add_bcast(ops::prelu(ops::sub_bcast(x, gs), beta), zs);
  }
  const Var<T> gs = ops::reshape(p.gamma_shift, cs);
  const Var<T> zs = ops::reshape(p.zeta_shift, cs);
  return ops::add_bcast(ops::prelu(ops::sub_bcast(x, gs), beta), zs);
}

template <typename T>
Var<T> dyprelu(const Var<T>& x, const PReLUParams<T>& p) {
  return rprelu(x, p);
}

template <typename T>
BinaryWeightMeta<T> binarize_weights(const Tensor<T>& w) {
  if (w.size() == 0) throw ArgumentError("binarize_weights: empty weight tensor");
  // Mean taken relative to the minimum so a constant W yields u == W exactly.
  const T lo = *std::min_element(w.data().begin(), w.data().end());
  double offset_sum = 0, abs_sum = 0;
  for (const T& v : w.data()) {
    offset_sum += static_cast<double>(v - lo);
    abs_sum += std::abs(static_cast<double>(v));
  }
  const double n = static_cast<double>(w.size());
  BinaryWeightMeta<T> meta;
  meta.u = static_cast<T>(static_cast<double>(lo) + offset_sum / n);
  meta.alpha_w = static_cast<T>(abs_sum / n);
  const std::size_t rows = w.rank() < 2 ? 1 : w.dim(0);
  std::vector<T> centered(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) centered[i] = w[i] - meta.u;
  meta.packed = bitkernel::pack_signs<T>(centered, rows, w.size() / rows);
  return meta;
}

template <typename T>
Var<T> binary_weight(const Var<T>& w, const BinarizeOptions& opts) {
  std::vector<std::size_t> axes(w.value().rank());
  for (std::size_t d = 0; d < axes.size(); ++d) axes[d] = d;
  const Var<T> u = ops::mean_keep(w, axes);
  return sign(ops::sub_bcast(w, u), opts);
}

template <typename T>
Var<T> binary_linear(const Var<T>& xb, const Var<T>& w, const BinarizeOptions& opts, bool binary_weights) {
  if (!binary_weights) return ops::linear(xb, w, false);
  const Var<T> wb = binary_weight(w, opts);
  const Var<T> raw = ops::linear(xb, wb, opts.exact());
  return ops::mul_bcast(raw, ops::reshape(ops::mean_abs(w), Shape{1, 1}));
}

template <typename T>
Var<T> shifted_attention_sign(const Var<T>& p, const Var<T>& s, const BinarizeOptions& opts) {
  const std::size_t n = p.shape().back();
  const std::size_t rows = p.value().size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i) sum += static_cast<double>(p.value()[r * n + i]);
    if (std::abs(sum - 1.0) > 1e-5) {
      throw ContractViolation("shifted_attention_sign: attention row " + std::to_string(r) + " sums to " +
                              std::to_string(sum));
    }
  }
  if (!s.value().all_finite()) throw ContractViolation("shifted_attention_sign: non-finite shift");
  return sign(ops::sub_bcast(p, s), opts);
}

#define DYBNN_INSTANTIATE(T)                                                                       \
  template struct Hyperfunction<T>;                                                                \
  template Var<T> sign<T>(const Var<T>&, const BinarizeOptions&);                                  \
  template Var<T> rsign<T>(const Var<T>&, const Var<T>&, std::size_t, const BinarizeOptions&);     \
  template Var<T> dysign_thresholds<T>(const Var<T>&, const DySignParams<T>&);                     \
  template Var<T> dysign<T>(const Var<T>&, const DySignParams<T>&, const BinarizeOptions&);        \
  template Var<T> dysign<T>(const Var<T>&, const DySignParams<T>&, const BinarizeOptions&, Var<T>*); \
  template Var<T> rprelu<T>(const Var<T>&, const PReLUParams<T>&);                                 \
  template Var<T> dyprelu<T>(const Var<T>&, const PReLUParams<T>&);                                \
  template BinaryWeightMeta<T> binarize_weights<T>(const Tensor<T>&);                              \
  template Var<T> binary_weight<T>(const Var<T>&, const BinarizeOptions&);                         \
  template Var<T> binary_linear<T>(const Var<T>&, const Var<T>&, const BinarizeOptions&, bool);    \
  template Var<T> shifted_attention_sign<T>(const Var<T>&, const Var<T>&, const BinarizeOptions&);

DYBNN_INSTANTIATE(float)
DYBNN_INSTANTIATE(double)
#undef DYBNN_INSTANTIATE

}  // namespace dybnn::binarizers
