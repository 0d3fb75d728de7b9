#include "dybnn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dybnn/bitkernel.hpp"

namespace dybnn::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

template <typename T>
bool wants(const Node<T>& n, std::size_t i) {
  return n.inputs[i]->requires_grad;
}

template <typename T>
void accumulate(Node<T>& n, std::size_t i, const Tensor<T>& g) {
  if (!wants(n, i)) return;
  auto& dst = n.inputs[i]->grad_buffer();
  T* d = dst.ptr();
  const T* s = g.ptr();
  for (std::size_t k = 0; k < dst.size(); ++k) d[k] += s[k];
}

// Visits (x_index, t_index) pairs where t broadcasts into x.
template <typename F>
void for_each_bcast(const Shape& xs, const Shape& ts, F&& f) {
  const std::size_t r = xs.size();
  if (ts.size() != r) throw DimensionError("broadcast rank mismatch: " + shape_str(xs) + " vs " + shape_str(ts));
  std::vector<std::size_t> tstride(r, 0);
  std::size_t s = 1;
  for (std::size_t d = r; d-- > 0;) {
    if (ts[d] == xs[d]) {
      tstride[d] = s;
    } else if (ts[d] != 1) {
      throw DimensionError("cannot broadcast " + shape_str(ts) + " into " + shape_str(xs));
    }
    s *= ts[d];
  }
  const std::size_t inner = xs[r - 1];
  const std::size_t inner_stride = tstride[r - 1];
  const std::size_t outer = numel(xs) / inner;
  std::vector<std::size_t> idx(r, 0);
  std::size_t toff = 0;
  std::size_t xi = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) f(xi++, toff + i * inner_stride);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      toff += tstride[d];
      if (idx[d] < xs[d]) break;
      toff -= tstride[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <typename T>
void require_pm_one(const Tensor<T>& t, const char* what) {
  if (!is_pm_one(t)) throw ContractViolation(std::string(what) + ": packed operand is not +-1 valued");
}

template <typename T>
Tensor<T> gemm_nt(const Tensor<T>& a, std::size_t m, std::size_t k, const T* b, std::size_t n) {
  Tensor<T> out(Shape{m, n});
  Map<T>(out.ptr(), m, n).noalias() = MapC<T>(a.ptr(), m, k) * MapC<T>(b, n, k).transpose();
  return out;
}

template <typename T>
void packed_nt(const T* a, std::size_t m, std::size_t k, const T* b, std::size_t n, T* out) {
  const auto pa = bitkernel::pack_signs<T>(std::span<const T>(a, m * k), m, k);
  const auto pb = bitkernel::pack_signs<T>(std::span<const T>(b, n * k), n, k);
  const auto prod = bitkernel::binary_gemm(pa, pb);
  for (std::size_t i = 0; i < m * n; ++i) out[i] = static_cast<T>(prod.data[i]);
}

// im2col for one sample: cols [C*KH*KW, OH*OW].
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw, std::size_t stride,
            std::size_t pad, T pad_value, std::size_t oh, std::size_t ow, T* cols) {
  const std::size_t plane = oh * ow;
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* dst = cols + ((ci * kh + ky) * kw + kx) * plane;
        for (std::size_t y = 0; y < oh; ++y) {
          const auto iy = static_cast<std::ptrdiff_t>(y * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const auto ix = static_cast<std::ptrdiff_t>(xo * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                ix < static_cast<std::ptrdiff_t>(w);
            dst[y * ow + xo] = inside ? x[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)]
                                      : pad_value;
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, T* dx) {
  const std::size_t plane = oh * ow;
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* src = cols + ((ci * kh + ky) * kw + kx) * plane;
        for (std::size_t y = 0; y < oh; ++y) {
          const auto iy = static_cast<std::ptrdiff_t>(y * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t xo = 0; xo < ow; ++xo) {
            const auto ix = static_cast<std::ptrdiff_t>(xo * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            dx[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += src[y * ow + xo];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, T (*f)(T, T)) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <typename T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& target) {
  Tensor<T> out(target, T(0));
  T* o = out.ptr();
  const T* s = g.ptr();
  for_each_bcast(g.shape(), target, [&](std::size_t xi, std::size_t ti) { o[ti] += s[xi]; });
  return out;
}

template <typename T>
std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t d = s.size(); d-- > 1;) st[d - 1] = st[d] * s[d];
  return st;
}

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& xs = x.shape();
  const std::size_t r = xs.size();
  Shape os(r);
  for (std::size_t d = 0; d < r; ++d) os[d] = xs[perm[d]];
  const auto xst = strides_of<T>(xs);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t d = 0; d < r; ++d) src_stride[d] = xst[perm[d]];
  Tensor<T> out(os);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = x[off];
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += src_stride[d];
      if (idx[d] < os[d]) break;
      off -= src_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return out;
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
double gelu_deriv(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

}  // namespace

template <typename T>
bool is_pm_one(const Tensor<T>& t) {
  for (const T& v : t.data()) {
    if (v != T(1) && v != T(-1)) return false;
  }
  return true;
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  return record<T>("add", elementwise<T>(a.value(), b.value(), [](T x, T y) { return x + y; }), {a, b});
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  return record<T>("sub", elementwise<T>(a.value(), b.value(), [](T x, T y) { return x - y; }), {a, b});
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  return record<T>("mul", elementwise<T>(a.value(), b.value(), [](T x, T y) { return x * y; }), {a, b});
}

template <typename T>
Var<T> add_bcast(const Var<T>& x, const Var<T>& t) {
  Tensor<T> out(x.shape());
  const T* xv = x.value().ptr();
  const T* tv = t.value().ptr();
  T* o = out.ptr();
  for_each_bcast(x.shape(), t.shape(), [&](std::size_t xi, std::size_t ti) { o[xi] = xv[xi] + tv[ti]; });
  return record<T>("add_bcast", std::move(out), {x, t});
}

template <typename T>
Var<T> sub_bcast(const Var<T>& x, const Var<T>& t) {
  Tensor<T> out(x.shape());
  const T* xv = x.value().ptr();
  const T* tv = t.value().ptr();
  T* o = out.ptr();
  for_each_bcast(x.shape(), t.shape(), [&](std::size_t xi, std::size_t ti) { o[xi] = xv[xi] - tv[ti]; });
  return record<T>("sub_bcast", std::move(out), {x, t});
}

template <typename T>
Var<T> mul_bcast(const Var<T>& x, const Var<T>& t) {
  Tensor<T> out(x.shape());
  const T* xv = x.value().ptr();
  const T* tv = t.value().ptr();
  T* o = out.ptr();
  for_each_bcast(x.shape(), t.shape(), [&](std::size_t xi, std::size_t ti) { o[xi] = xv[xi] * tv[ti]; });
  return record<T>("mul_bcast", std::move(out), {x, t});
}

template <typename T>
Var<T> scale(const Var<T>& x, double c) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * static_cast<T>(c);
  return record<T>("scale", std::move(out), {x}, {}, {c});
}

// ---------------------------------------------------------------- products

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out(Shape{m, n});
  Map<T>(out.ptr(), m, n).noalias() = MapC<T>(a.value().ptr(), m, k) * MapC<T>(b.value().ptr(), k, n);
  return record<T>("matmul", std::move(out), {a, b});
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, bool packed) {
  if (x.value().rank() != 2 || w.value().rank() != 2 || x.dim(1) != w.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " against weight " + shape_str(w.shape()));
  }
  const std::size_t r = x.dim(0), k = x.dim(1), o = w.dim(0);
  Tensor<T> out;
  if (packed) {
    require_pm_one(x.value(), "linear input");
    require_pm_one(w.value(), "linear weight");
    out = Tensor<T>(Shape{r, o});
    packed_nt(x.value().ptr(), r, k, w.value().ptr(), o, out.ptr());
  } else {
    out = gemm_nt(x.value(), r, k, w.value().ptr(), o);
  }
  return record<T>("linear", std::move(out), {x, w});
}

template <typename T>
Var<T> bmm_nt(const Var<T>& a, const Var<T>& b, bool packed) {
  if (a.value().rank() != 3 || b.value().rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
    throw DimensionError("bmm_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  if (packed) {
    require_pm_one(a.value(), "bmm_nt lhs");
    require_pm_one(b.value(), "bmm_nt rhs");
  }
  Tensor<T> out(Shape{g, m, n});
  for (std::size_t i = 0; i < g; ++i) {
    const T* ap = a.value().ptr() + i * m * k;
    const T* bp = b.value().ptr() + i * n * k;
    T* op = out.ptr() + i * m * n;
    if (packed) {
      packed_nt(ap, m, k, bp, n, op);
    } else {
      Map<T>(op, m, n).noalias() = MapC<T>(ap, m, k) * MapC<T>(bp, n, k).transpose();
    }
  }
  return record<T>("bmm_nt", std::move(out), {a, b});
}

template <typename T>
Var<T> bmm_nn(const Var<T>& a, const Var<T>& b, bool packed) {
  if (a.value().rank() != 3 || b.value().rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw DimensionError("bmm_nn: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t g = a.dim(0), m = a.dim(1), n = a.dim(2), k = b.dim(2);
  if (packed) {
    require_pm_one(a.value(), "bmm_nn lhs");
    require_pm_one(b.value(), "bmm_nn rhs");
  }
  Tensor<T> out(Shape{g, m, k});
  std::vector<T> bt(packed ? n * k : 0);
  for (std::size_t i = 0; i < g; ++i) {
    const T* ap = a.value().ptr() + i * m * n;
    const T* bp = b.value().ptr() + i * n * k;
    T* op = out.ptr() + i * m * k;
    if (packed) {
      Map<T>(bt.data(), k, n) = MapC<T>(bp, n, k).transpose();
      packed_nt(ap, m, n, bt.data(), k, op);
    } else {
      Map<T>(op, m, k).noalias() = MapC<T>(ap, m, n) * MapC<T>(bp, n, k);
    }
  }
  return record<T>("bmm_nn", std::move(out), {a, b});
}

// ---------------------------------------------------------------- layout

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  return record<T>("reshape", x.value().reshaped(std::move(shape)), {x});
}

template <typename T>
Var<T> permute(const Var<T>& x, std::vector<std::size_t> perm) {
  const std::size_t r = x.value().rank();
  std::vector<std::size_t> check(perm);
  std::sort(check.begin(), check.end());
  for (std::size_t d = 0; d < check.size(); ++d) {
    if (check.size() != r || check[d] != d) throw DimensionError("permute: invalid permutation for rank " + std::to_string(r));
  }
  std::vector<double> attrs(perm.begin(), perm.end());
  return record<T>("permute", permute_tensor(x.value(), perm), {x}, {}, std::move(attrs));
}

template <typename T>
Var<T> concat(const Var<T>& a, const Var<T>& b, std::size_t axis) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != bs.size() || axis >= as.size()) throw DimensionError("concat: rank/axis mismatch");
  for (std::size_t d = 0; d < as.size(); ++d) {
    if (d != axis && as[d] != bs[d]) throw DimensionError("concat: " + shape_str(as) + " vs " + shape_str(bs));
  }
  Shape os = as;
  os[axis] = as[axis] + bs[axis];
  const std::size_t outer = std::accumulate(as.begin(), as.begin() + static_cast<std::ptrdiff_t>(axis), std::size_t{1},
                                            std::multiplies<>());
  const std::size_t inner = std::accumulate(as.begin() + static_cast<std::ptrdiff_t>(axis) + 1, as.end(),
                                            std::size_t{1}, std::multiplies<>());
  const std::size_t ca = as[axis] * inner, cb = bs[axis] * inner;
  Tensor<T> out(os);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.value().ptr() + o * ca, ca, out.ptr() + o * (ca + cb));
    std::copy_n(b.value().ptr() + o * cb, cb, out.ptr() + o * (ca + cb) + ca);
  }
  return record<T>("concat", std::move(out), {a, b}, {}, {static_cast<double>(axis)});
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> mean_keep(const Var<T>& x, std::vector<std::size_t> axes) {
  Shape os = x.shape();
  std::size_t count = 1;
  for (auto ax : axes) {
    if (ax >= os.size()) throw DimensionError("mean_keep: axis out of range for " + shape_str(x.shape()));
    count *= os[ax];
    os[ax] = 1;
  }
  Tensor<T> out = reduce_to(x.value(), os);
  const T inv = T(1) / static_cast<T>(count);
  for (auto& v : out.data()) v *= inv;
  return record<T>("mean_keep", std::move(out), {x}, {}, {static_cast<double>(count)});
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  T s = 0;
  for (const T& v : x.value().data()) s += v;
  return record<T>("sum_all", Tensor<T>::scalar(s), {x});
}

template <typename T>
Var<T> mean_abs(const Var<T>& x) {
  T s = 0;
  for (const T& v : x.value().data()) s += std::abs(v);
  return record<T>("mean_abs", Tensor<T>::scalar(s / static_cast<T>(x.value().size())), {x});
}

// ---------------------------------------------------------------- activations

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] > T(0) ? x.value()[i] : T(0);
  return record<T>("relu", std::move(out), {x});
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(gelu_value(static_cast<double>(x.value()[i])));
  return record<T>("gelu", std::move(out), {x});
}

template <typename T>
Var<T> hardtanh(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x.value()[i], T(-1), T(1));
  return record<T>("hardtanh", std::move(out), {x});
}

template <typename T>
Var<T> sign_ste(const Var<T>& x, SteBackward mode, double clip) {
  if (!(clip > 0)) throw ArgumentError("STE clip must be positive");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] > T(0) ? T(1) : T(-1);
  return record<T>("sign_ste", std::move(out), {x}, {}, {clip, mode == SteBackward::zero ? 1.0 : 0.0});
}

template <typename T>
Tensor<T> ste_sign_grad(const Tensor<T>& upstream, const Tensor<T>& saved_input, double clip) {
  require_same_shape(upstream.shape(), saved_input.shape(), "ste_sign_grad");
  if (!(clip > 0)) throw ArgumentError("STE clip must be positive");
  Tensor<T> out(upstream.shape());
  const T c = static_cast<T>(clip);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(saved_input[i]) <= c ? upstream[i] : T(0);
  return out;
}

template <typename T>
Var<T> softmax_last(const Var<T>& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.value().size() / n;
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.value().ptr() + r * n;
    T* dst = out.ptr() + r * n;
    const T mx = *std::max_element(src, src + n);
    T sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      dst[i] = std::exp(src[i] - mx);
      sum += dst[i];
    }
    for (std::size_t i = 0; i < n; ++i) dst[i] /= sum;
  }
  return record<T>("softmax", std::move(out), {x});
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> labels) {
  if (logits.value().rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  Tensor<T> probs(logits.shape());
  double loss = 0;
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
      throw ArgumentError("cross_entropy: label " + std::to_string(labels[r]) + " outside [0, " + std::to_string(k) + ")");
    }
    const T* src = logits.value().ptr() + r * k;
    T* p = probs.ptr() + r * k;
    const T mx = *std::max_element(src, src + k);
    double sum = 0;
    for (std::size_t i = 0; i < k; ++i) sum += std::exp(static_cast<double>(src[i] - mx));
    const double lse = std::log(sum) + static_cast<double>(mx);
    for (std::size_t i = 0; i < k; ++i) p[i] = static_cast<T>(std::exp(static_cast<double>(src[i]) - lse));
    loss += lse - static_cast<double>(src[labels[r]]);
  }
  std::vector<std::int64_t> aux(labels.begin(), labels.end());
  return record<T>("cross_entropy", Tensor<T>::scalar(static_cast<T>(loss / static_cast<double>(b))), {logits},
                   {std::move(probs)}, {}, std::move(aux));
}

// ---------------------------------------------------------------- convolution & pooling

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::size_t stride, std::size_t padding, double pad_value,
              bool packed) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1)) {
    throw DimensionError("conv2d: input " + shape_str(xv.shape()) + " against weights " + shape_str(wv.shape()));
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const std::size_t o = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  const std::size_t oh = bitkernel::conv_out_extent(h, kh, stride, padding);
  const std::size_t ow = bitkernel::conv_out_extent(wd, kw, stride, padding);
  Tensor<T> out;
  if (packed) {
    if (pad_value != -1.0 && padding > 0) throw ContractViolation("packed conv2d pads with -1");
    require_pm_one(xv, "conv2d input");
    require_pm_one(wv, "conv2d weight");
    out = bitkernel::binary_conv2d(xv, wv, stride, padding);
  } else {
    out = Tensor<T>(Shape{n, o, oh, ow});
    const std::size_t ckk = c * kh * kw, plane = oh * ow;
    std::vector<T> cols(ckk * plane);
    for (std::size_t b = 0; b < n; ++b) {
      im2col(xv.ptr() + b * c * h * wd, c, h, wd, kh, kw, stride, padding, static_cast<T>(pad_value), oh, ow, cols.data());
      Map<T>(out.ptr() + b * o * plane, o, plane).noalias() =
          MapC<T>(wv.ptr(), o, ckk) * MapC<T>(cols.data(), ckk, plane);
    }
  }
  return record<T>("conv2d", std::move(out), {x, w}, {},
                   {static_cast<double>(stride), static_cast<double>(padding), pad_value});
}

template <typename T>
Var<T> maxpool2d(const Var<T>& x, std::size_t kernel, std::size_t stride, std::size_t padding) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("maxpool2d expects NCHW, got " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = bitkernel::conv_out_extent(h, kernel, stride, padding);
  const std::size_t ow = bitkernel::conv_out_extent(w, kernel, stride, padding);
  Tensor<T> out(Shape{n, c, oh, ow});
  std::vector<std::int64_t> argmax(out.size());
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = xv.ptr() + p * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t best_i = -1;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(y * stride + ky) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(xo * stride + kx) - static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const auto i = static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
            if (best_i < 0 || src[i] > best) {
              best = src[i];
              best_i = static_cast<std::int64_t>(p * h * w + i);
            }
          }
        }
        const std::size_t oi = (p * oh + y) * ow + xo;
        out[oi] = best;
        argmax[oi] = best_i;
      }
    }
  }
  return record<T>("maxpool2d", std::move(out), {x}, {}, {}, std::move(argmax));
}

template <typename T>
Var<T> avgpool2d(const Var<T>& x, std::size_t kernel, std::size_t stride) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("avgpool2d expects NCHW, got " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = bitkernel::conv_out_extent(h, kernel, stride, 0);
  const std::size_t ow = bitkernel::conv_out_extent(w, kernel, stride, 0);
  Tensor<T> out(Shape{n, c, oh, ow});
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = xv.ptr() + p * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo) {
        T s = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) s += src[(y * stride + ky) * w + xo * stride + kx];
        }
        out[(p * oh + y) * ow + xo] = s * inv;
      }
    }
  }
  return record<T>("avgpool2d", std::move(out), {x}, {}, {static_cast<double>(kernel), static_cast<double>(stride)});
}

// ---------------------------------------------------------------- normalisation

template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                   Tensor<T>& running_var, bool training, double momentum, double eps) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("batchnorm2d expects NCHW, got " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  if (gamma.value().size() != c || beta.value().size() != c || running_mean.size() != c || running_var.size() != c) {
    throw DimensionError("batchnorm2d: parameters do not match " + std::to_string(c) + " channels");
  }
  const double count = static_cast<double>(n * plane);
  Tensor<T> mean(Shape{c}), inv_std(Shape{c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (training) {
      double s = 0, ss = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = xv.ptr() + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += static_cast<double>(src[i]);
      }
      const double mu = s / count;
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = xv.ptr() + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = static_cast<double>(src[i]) - mu;
          ss += d * d;
        }
      }
      const double var = ss / count;
      mean[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + eps));
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      running_mean[ch] = static_cast<T>((1 - momentum) * running_mean[ch] + momentum * mu);
      running_var[ch] = static_cast<T>((1 - momentum) * running_var[ch] + momentum * unbiased);
    } else {
      mean[ch] = running_mean[ch];
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[ch]) + eps));
    }
  }
  Tensor<T> xhat(xv.shape()), out(xv.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        xhat[off + i] = (xv[off + i] - mean[ch]) * inv_std[ch];
        out[off + i] = gamma.value()[ch] * xhat[off + i] + beta.value()[ch];
      }
    }
  }
  return record<T>("batchnorm2d", std::move(out), {x, gamma, beta}, {std::move(xhat), std::move(inv_std)},
                   {training ? 1.0 : 0.0});
}

template <typename T>
Var<T> layernorm_last(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps) {
  const std::size_t d = x.shape().back();
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw DimensionError("layernorm: affine parameters do not match last extent " + std::to_string(d));
  }
  const std::size_t rows = x.value().size() / d;
  Tensor<T> xhat(x.shape()), out(x.shape()), inv_std(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.value().ptr() + r * d;
    double mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += static_cast<double>(src[i]);
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t i = 0; i < d; ++i) {
      const double t = static_cast<double>(src[i]) - mu;
      var += t * t;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<T>(is);
    for (std::size_t i = 0; i < d; ++i) {
      xhat[r * d + i] = static_cast<T>((static_cast<double>(src[i]) - mu) * is);
      out[r * d + i] = gamma.value()[i] * xhat[r * d + i] + beta.value()[i];
    }
  }
  return record<T>("layernorm", std::move(out), {x, gamma, beta}, {std::move(xhat), std::move(inv_std)});
}

template <typename T>
Var<T> prelu(const Var<T>& x, const Var<T>& slope) {
  Tensor<T> out(x.shape());
  const T* xv = x.value().ptr();
  const T* sv = slope.value().ptr();
  T* o = out.ptr();
  for_each_bcast(x.shape(), slope.shape(), [&](std::size_t xi, std::size_t ti) {
    o[xi] = xv[xi] > T(0) ? xv[xi] : sv[ti] * xv[xi];
  });
  return record<T>("prelu", std::move(out), {x, slope});
}

// ---------------------------------------------------------------- backward rules

namespace detail {

template <typename T>
void register_core_rules(GradRegistry<T>& reg) {
  reg.add("add", [](Node<T>& n) {
    accumulate(n, 0, n.grad);
    accumulate(n, 1, n.grad);
  });
  reg.add("sub", [](Node<T>& n) {
    accumulate(n, 0, n.grad);
    if (wants(n, 1)) {
      Tensor<T> g = n.grad;
      for (auto& v : g.data()) v = -v;
      accumulate(n, 1, g);
    }
  });
  reg.add("mul", [](Node<T>& n) {
    const auto& a = n.inputs[0]->value;
    const auto& b = n.inputs[1]->value;
    if (wants(n, 0)) accumulate(n, 0, elementwise<T>(n.grad, b, [](T g, T v) { return g * v; }));
    if (wants(n, 1)) accumulate(n, 1, elementwise<T>(n.grad, a, [](T g, T v) { return g * v; }));
  });
  reg.add("add_bcast", [](Node<T>& n) {
    accumulate(n, 0, n.grad);
    if (wants(n, 1)) accumulate(n, 1, reduce_to(n.grad, n.inputs[1]->value.shape()));
  });
  reg.add("sub_bcast", [](Node<T>& n) {
    accumulate(n, 0, n.grad);
    if (wants(n, 1)) {
      Tensor<T> r = reduce_to(n.grad, n.inputs[1]->value.shape());
      for (auto& v : r.data()) v = -v;
      accumulate(n, 1, r);
    }
  });
  reg.add("mul_bcast", [](Node<T>& n) {
    const auto& x = n.inputs[0]->value;
    const auto& t = n.inputs[1]->value;
    if (wants(n, 0)) {
      Tensor<T> gx(x.shape());
      for_each_bcast(x.shape(), t.shape(), [&](std::size_t xi, std::size_t ti) { gx[xi] = n.grad[xi] * t[ti]; });
      accumulate(n, 0, gx);
    }
    if (wants(n, 1)) {
      Tensor<T> gt(t.shape(), T(0));
      for_each_bcast(x.shape(), t.shape(), [&](std::size_t xi, std::size_t ti) { gt[ti] += n.grad[xi] * x[xi]; });
      accumulate(n, 1, gt);
    }
  });
  reg.add("scale", [](Node<T>& n) {
    Tensor<T> g = n.grad;
    for (auto& v : g.data()) v *= static_cast<T>(n.attrs[0]);
    accumulate(n, 0, g);
  });
  reg.add("matmul", [](Node<T>& n) {
    const auto& a = n.inputs[0]->value;
    const auto& b = n.inputs[1]->value;
    const std::size_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
    if (wants(n, 0)) {
      Tensor<T> ga(a.shape());
      Map<T>(ga.ptr(), m, k).noalias() = MapC<T>(n.grad.ptr(), m, nn) * MapC<T>(b.ptr(), k, nn).transpose();
      accumulate(n, 0, ga);
    }
    if (wants(n, 1)) {
      Tensor<T> gb(b.shape());
      Map<T>(gb.ptr(), k, nn).noalias() = MapC<T>(a.ptr(), m, k).transpose() * MapC<T>(n.grad.ptr(), m, nn);
      accumulate(n, 1, gb);
    }
  });
  reg.add("linear", [](Node<T>& n) {
    const auto& x = n.inputs[0]->value;
    const auto& w = n.inputs[1]->value;
    const std::size_t r = x.dim(0), k = x.dim(1), o = w.dim(0);
    if (wants(n, 0)) {
      Tensor<T> gx(x.shape());
      Map<T>(gx.ptr(), r, k).noalias() = MapC<T>(n.grad.ptr(), r, o) * MapC<T>(w.ptr(), o, k);
      accumulate(n, 0, gx);
    }
    if (wants(n, 1)) {
      Tensor<T> gw(w.shape());
      Map<T>(gw.ptr(), o, k).noalias() = MapC<T>(n.grad.ptr(), r, o).transpose() * MapC<T>(x.ptr(), r, k);
      accumulate(n, 1, gw);
    }
  });
  reg.add("bmm_nt", [](Node<T>& n) {
    const auto& a = n.inputs[0]->value;
    const auto& b = n.inputs[1]->value;
    const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2), nn = b.dim(1);
    Tensor<T> ga, gb;
    if (wants(n, 0)) ga = Tensor<T>(a.shape());
    if (wants(n, 1)) gb = Tensor<T>(b.shape());
    for (std::size_t i = 0; i < g; ++i) {
      MapC<T> go(n.grad.ptr() + i * m * nn, m, nn);
      if (wants(n, 0)) Map<T>(ga.ptr() + i * m * k, m, k).noalias() = go * MapC<T>(b.ptr() + i * nn * k, nn, k);
      if (wants(n, 1))
        Map<T>(gb.ptr() + i * nn * k, nn, k).noalias() = go.transpose() * MapC<T>(a.ptr() + i * m * k, m, k);
    }
    if (wants(n, 0)) accumulate(n, 0, ga);
    if (wants(n, 1)) accumulate(n, 1, gb);
  });
  reg.add("bmm_nn", [](Node<T>& n) {
    const auto& a = n.inputs[0]->value;
    const auto& b = n.inputs[1]->value;
    const std::size_t g = a.dim(0), m = a.dim(1), nn = a.dim(2), k = b.dim(2);
    Tensor<T> ga, gb;
    if (wants(n, 0)) ga = Tensor<T>(a.shape());
    if (wants(n, 1)) gb = Tensor<T>(b.shape());
    for (std::size_t i = 0; i < g; ++i) {
      MapC<T> go(n.grad.ptr() + i * m * k, m, k);
      if (wants(n, 0))
        Map<T>(ga.ptr() + i * m * nn, m, nn).noalias() = go * MapC<T>(b.ptr() + i * nn * k, nn, k).transpose();
      if (wants(n, 1))
        Map<T>(gb.ptr() + i * nn * k, nn, k).noalias() = MapC<T>(a.ptr() + i * m * nn, m, nn).transpose() * go;
    }
    if (wants(n, 0)) accumulate(n, 0, ga);
    if (wants(n, 1)) accumulate(n, 1, gb);
  });
  reg.add("reshape", [](Node<T>& n) { accumulate(n, 0, n.grad.reshaped(n.inputs[0]->value.shape())); });
  reg.add("permute", [](Node<T>& n) {
    std::vector<std::size_t> inv(n.attrs.size());
    for (std::size_t d = 0; d < n.attrs.size(); ++d) inv[static_cast<std::size_t>(n.attrs[d])] = d;
    accumulate(n, 0, permute_tensor(n.grad, inv));
  });
  reg.add("concat", [](Node<T>& n) {
    const auto axis = static_cast<std::size_t>(n.attrs[0]);
    const Shape& as = n.inputs[0]->value.shape();
    const Shape& bs = n.inputs[1]->value.shape();
    const std::size_t outer = std::accumulate(as.begin(), as.begin() + static_cast<std::ptrdiff_t>(axis),
                                              std::size_t{1}, std::multiplies<>());
    const std::size_t inner = std::accumulate(as.begin() + static_cast<std::ptrdiff_t>(axis) + 1, as.end(),
                                              std::size_t{1}, std::multiplies<>());
    const std::size_t ca = as[axis] * inner, cb = bs[axis] * inner;
    Tensor<T> ga(as), gb(bs);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(n.grad.ptr() + o * (ca + cb), ca, ga.ptr() + o * ca);
      std::copy_n(n.grad.ptr() + o * (ca + cb) + ca, cb, gb.ptr() + o * cb);
    }
    accumulate(n, 0, ga);
    accumulate(n, 1, gb);
  });
  reg.add("mean_keep", [](Node<T>& n) {
    const auto& x = n.inputs[0]->value;
    const T inv = T(1) / static_cast<T>(n.attrs[0]);
    Tensor<T> gx(x.shape());
    for_each_bcast(x.shape(), n.value.shape(), [&](std::size_t xi, std::size_t ti) { gx[xi] = n.grad[ti] * inv; });
    accumulate(n, 0, gx);
  });
  reg.add("sum_all", [](Node<T>& n) { accumulate(n, 0, Tensor<T>(n.inputs[0]->value.shape(), n.grad[0])); });
  reg.add("mean_abs", [](Node<T>& n) {
    const auto& x = n.inputs[0]->value;
    const T k = n.grad[0] / static_cast<T>(x.size());
    Tensor<T> gx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] = x[i] > T(0) ? k : (x[i] < T(0) ? -k : T(0));
    accumulate(n, 0, gx);
  });
  reg.add("relu", [](Node<T>& n) {
    accumulate(n, 0, elementwise<T>(n.grad, n.inputs[0]->value, [](T g, T v) { return v > T(0) ? g : T(0); }));
  });
  reg.add("gelu", [](Node<T>& n) {
    accumulate(n, 0, elementwise<T>(n.grad, n.inputs[0]->value, [](T g, T v) {
      return g * static_cast<T>(gelu_deriv(static_cast<double>(v)));
    }));
  });
  reg.add("hardtanh", [](Node<T>& n) {
    accumulate(n, 0, elementwise<T>(n.grad, n.inputs[0]->value, [](T g, T v) { return std::abs(v) <= T(1) ? g : T(0); }));
  });
  reg.add("sign_ste", [](Node<T>& n) {
    if (n.attrs[1] != 0.0) return;  // zero mode: true derivative a.e.
    accumulate(n, 0, ste_sign_grad(n.grad, n.inputs[0]->value, n.attrs[0]));
  });
  reg.add("softmax", [](Node<T>& n) {
    const std::size_t d = n.value.shape().back();
    const std::size_t rows = n.value.size() / d;
    Tensor<T> gx(n.value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = n.value.ptr() + r * d;
      const T* g = n.grad.ptr() + r * d;
      T dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += g[i] * y[i];
      for (std::size_t i = 0; i < d; ++i) gx[r * d + i] = y[i] * (g[i] - dot);
    }
    accumulate(n, 0, gx);
  });
  reg.add("cross_entropy", [](Node<T>& n) {
    Tensor<T> gx = n.saved[0];
    const std::size_t b = gx.dim(0), k = gx.dim(1);
    const T s = n.grad[0] / static_cast<T>(b);
    for (std::size_t r = 0; r < b; ++r) {
      gx[r * k + static_cast<std::size_t>(n.aux[r])] -= T(1);
      for (std::size_t i = 0; i < k; ++i) gx[r * k + i] *= s;
    }
    accumulate(n, 0, gx);
  });
  reg.add("conv2d", [](Node<T>& n) {
    const auto& x = n.inputs[0]->value;
    const auto& w = n.inputs[1]->value;
    const auto stride = static_cast<std::size_t>(n.attrs[0]);
    const auto pad = static_cast<std::size_t>(n.attrs[1]);
    const auto pad_value = static_cast<T>(n.attrs[2]);
    const std::size_t bn = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::size_t oh = n.value.dim(2), ow = n.value.dim(3), plane = oh * ow, ckk = c * kh * kw;
    Tensor<T> gx, gw;
    if (wants(n, 0)) gx = Tensor<T>(x.shape(), T(0));
    if (wants(n, 1)) gw = Tensor<T>(w.shape(), T(0));
    std::vector<T> cols(ckk * plane);
    for (std::size_t b = 0; b < bn; ++b) {
      MapC<T> go(n.grad.ptr() + b * o * plane, o, plane);
      if (wants(n, 1)) {
        im2col(x.ptr() + b * c * h * wd, c, h, wd, kh, kw, stride, pad, pad_value, oh, ow, cols.data());
        Map<T>(gw.ptr(), o, ckk).noalias() += go * MapC<T>(cols.data(), ckk, plane).transpose();
      }
      if (wants(n, 0)) {
        Map<T>(cols.data(), ckk, plane).noalias() = MapC<T>(w.ptr(), o, ckk).transpose() * go;
        col2im(cols.data(), c, h, wd, kh, kw, stride, pad, oh, ow, gx.ptr() + b * c * h * wd);
      }
    }
    if (wants(n, 0)) accumulate(n, 0, gx);
    if (wants(n, 1)) accumulate(n, 1, gw);
  });
  reg.add("maxpool2d", [](Node<T>& n) {
    Tensor<T> gx(n.inputs[0]->value.shape(), T(0));
    for (std::size_t i = 0; i < n.aux.size(); ++i) {
      if (n.aux[i] >= 0) gx[static_cast<std::size_t>(n.aux[i])] += n.grad[i];
    }
    accumulate(n, 0, gx);
  });
  reg.add("avgpool2d", [](Node<T>& n) {
    const auto& x = n.inputs[0]->value;
    const auto k = static_cast<std::size_t>(n.attrs[0]);
    const auto s = static_cast<std::size_t>(n.attrs[1]);
    const std::size_t h = x.dim(2), w = x.dim(3), oh = n.value.dim(2), ow = n.value.dim(3);
    const T inv = T(1) / static_cast<T>(k * k);
    Tensor<T> gx(x.shape(), T(0));
    for (std::size_t p = 0; p < x.dim(0) * x.dim(1); ++p) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xo = 0; xo < ow; ++xo) {
          const T g = n.grad[(p * oh + y) * ow + xo] * inv;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) gx[p * h * w + (y * s + ky) * w + xo * s + kx] += g;
          }
        }
      }
    }
    accumulate(n, 0, gx);
  });
  reg.add("batchnorm2d", [](Node<T>& n) {
    const auto& xhat = n.saved[0];
    const auto& inv_std = n.saved[1];
    const bool training = n.attrs[0] != 0.0;
    const auto& gamma = n.inputs[1]->value;
    const std::size_t bn = xhat.dim(0), c = xhat.dim(1), plane = xhat.dim(2) * xhat.dim(3);
    const double count = static_cast<double>(bn * plane);
    Tensor<T> gg(Shape{c}, T(0)), gb(Shape{c}, T(0));
    Tensor<T> gx;
    if (wants(n, 0)) gx = Tensor<T>(xhat.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sg = 0, sgx = 0;
      for (std::size_t b = 0; b < bn; ++b) {
        const std::size_t off = (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sg += static_cast<double>(n.grad[off + i]);
          sgx += static_cast<double>(n.grad[off + i] * xhat[off + i]);
        }
      }
      gg[ch] = static_cast<T>(sgx);
      gb[ch] = static_cast<T>(sg);
      if (!wants(n, 0)) continue;
      const double k = static_cast<double>(gamma[ch] * inv_std[ch]);
      for (std::size_t b = 0; b < bn; ++b) {
        const std::size_t off = (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double g = static_cast<double>(n.grad[off + i]);
          gx[off + i] = training ? static_cast<T>(k * (g - sg / count - static_cast<double>(xhat[off + i]) * sgx / count))
                                 : static_cast<T>(k * g);
        }
      }
    }
    if (wants(n, 0)) accumulate(n, 0, gx);
    accumulate(n, 1, gg);
    accumulate(n, 2, gb);
  });
  reg.add("layernorm", [](Node<T>& n) {
    const auto& xhat = n.saved[0];
    const auto& inv_std = n.saved[1];
    const auto& gamma = n.inputs[1]->value;
    const std::size_t d = xhat.shape().back();
    const std::size_t rows = xhat.size() / d;
    Tensor<T> gg(Shape{d}, T(0)), gb(Shape{d}, T(0)), gx(xhat.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      double s1 = 0, s2 = 0;
      for (std::size_t i = 0; i < d; ++i) {
        const T g = n.grad[r * d + i];
        gg[i] += g * xhat[r * d + i];
        gb[i] += g;
        const double gh = static_cast<double>(g * gamma[i]);
        s1 += gh;
        s2 += gh * static_cast<double>(xhat[r * d + i]);
      }
      const double dd = static_cast<double>(d);
      for (std::size_t i = 0; i < d; ++i) {
        const double gh = static_cast<double>(n.grad[r * d + i] * gamma[i]);
        gx[r * d + i] = static_cast<T>(static_cast<double>(inv_std[r]) *
                                       (gh - s1 / dd - static_cast<double>(xhat[r * d + i]) * s2 / dd));
      }
    }
    accumulate(n, 0, gx);
    accumulate(n, 1, gg);
    accumulate(n, 2, gb);
  });
  reg.add("prelu", [](Node<T>& n) {
    const auto& x = n.inputs[0]->value;
    const auto& s = n.inputs[1]->value;
    Tensor<T> gx(x.shape()), gs(s.shape(), T(0));
    for_each_bcast(x.shape(), s.shape(), [&](std::size_t xi, std::size_t ti) {
      if (x[xi] > T(0)) {
        gx[xi] = n.grad[xi];
      } else {
        gx[xi] = n.grad[xi] * s[ti];
        gs[ti] += n.grad[xi] * x[xi];
      }
    });
    accumulate(n, 0, gx);
    accumulate(n, 1, gs);
  });
}

}  // namespace detail

#define DYBNN_INSTANTIATE(T)                                                                                   \
  template bool is_pm_one<T>(const Tensor<T>&);                                                                \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> add_bcast<T>(const Var<T>&, const Var<T>&);                                                  \
  template Var<T> sub_bcast<T>(const Var<T>&, const Var<T>&);                                                  \
  template Var<T> mul_bcast<T>(const Var<T>&, const Var<T>&);                                                  \
  template Var<T> scale<T>(const Var<T>&, double);                                                             \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                                     \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, bool);                                               \
  template Var<T> bmm_nt<T>(const Var<T>&, const Var<T>&, bool);                                               \
  template Var<T> bmm_nn<T>(const Var<T>&, const Var<T>&, bool);                                               \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                                            \
  template Var<T> permute<T>(const Var<T>&, std::vector<std::size_t>);                                         \
  template Var<T> concat<T>(const Var<T>&, const Var<T>&, std::size_t);                                        \
  template Var<T> mean_keep<T>(const Var<T>&, std::vector<std::size_t>);                                       \
  template Var<T> sum_all<T>(const Var<T>&);                                                                   \
  template Var<T> mean_abs<T>(const Var<T>&);                                                                  \
  template Var<T> relu<T>(const Var<T>&);                                                                      \
  template Var<T> gelu<T>(const Var<T>&);                                                                      \
  template Var<T> hardtanh<T>(const Var<T>&);                                                                  \
  template Var<T> sign_ste<T>(const Var<T>&, SteBackward, double);                                             \
  template Tensor<T> ste_sign_grad<T>(const Tensor<T>&, const Tensor<T>&, double);                             \
  template Var<T> softmax_last<T>(const Var<T>&);                                                              \
  template Var<T> cross_entropy<T>(const Var<T>&, std::span<const std::int32_t>);                              \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, std::size_t, std::size_t, double, bool);             \
  template Var<T> maxpool2d<T>(const Var<T>&, std::size_t, std::size_t, std::size_t);                          \
  template Var<T> avgpool2d<T>(const Var<T>&, std::size_t, std::size_t);                                       \
  template Var<T> batchnorm2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&, bool,    \
                                 double, double);                                                              \
  template Var<T> layernorm_last<T>(const Var<T>&, const Var<T>&, const Var<T>&, double);                      \
  template Var<T> prelu<T>(const Var<T>&, const Var<T>&);                                                      \
  template void detail::register_core_rules<T>(GradRegistry<T>&);

DYBNN_INSTANTIATE(float)
DYBNN_INSTANTIATE(double)
#undef DYBNN_INSTANTIATE

}  // namespace dybnn::ops
