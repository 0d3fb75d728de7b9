#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dybnn/layer_graph.hpp"
#include "dybnn/rng.hpp"
#include "dybnn/tensor.hpp"

// Independent reference implementations used by the unit tests. Everything
// here is written with plain loops over std::vector so it shares no code with
// the library kernels it checks.
namespace testsupport {

using dybnn::Shape;
using dybnn::Tensor;

inline double sgn(double v) { return v > 0 ? 1.0 : -1.0; }

template <typename T = float>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  dybnn::Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T = float>
Tensor<T> random_pm(Shape shape, std::uint64_t seed) {
  dybnn::Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = (rng.next_u64() & 1U) ? T(1) : T(-1);
  return t;
}

// out[i][j] = sum_k sign(a[i][k]) * sign(b[j][k]) for row-major a [m, k], b [n, k].
inline std::vector<std::int64_t> sign_gemm_nt(const std::vector<double>& a, const std::vector<double>& b,
                                              std::size_t m, std::size_t n, std::size_t k) {
  std::vector<std::int64_t> out(m * n, 0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      std::int64_t acc = 0;
      for (std::size_t q = 0; q < k; ++q) acc += static_cast<std::int64_t>(sgn(a[i * k + q]) * sgn(b[j * k + q]));
      out[i * n + j] = acc;
    }
  }
  return out;
}

// Direct convolution of sign(x) with sign(w), border cells read as -1.
inline std::vector<double> sign_conv_direct(const std::vector<double>& x, const std::vector<double>& w,
                                            std::size_t n, std::size_t c, std::size_t h, std::size_t wd,
                                            std::size_t o, std::size_t kh, std::size_t kw, std::size_t stride,
                                            std::size_t pad, std::size_t& oh, std::size_t& ow) {
  oh = (h + 2 * pad - kh) / stride + 1;
  ow = (wd + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * o * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double acc = 0;
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + j) - static_cast<long>(pad);
                double v = -1.0;
                if (iy >= 0 && ix >= 0 && iy < static_cast<long>(h) && ix < static_cast<long>(wd)) {
                  v = sgn(x[((b * c + ic) * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)]);
                }
                acc += v * sgn(w[((oc * c + ic) * kh + i) * kw + j]);
              }
          out[((b * o + oc) * oh + y) * ow + xx] = acc;
        }
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& v) {
  double m = v[0];
  for (double x : v) m = std::max(m, x);
  std::vector<double> e(v.size());
  double s = 0;
  for (std::size_t i = 0; i < v.size(); ++i) s += (e[i] = std::exp(v[i] - m));
  for (double& x : e) x /= s;
  return e;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Two full-precision linear layers with an activation between them, on flat input.
inline dybnn::models::LayerGraph mlp_graph(std::size_t in, std::size_t hidden, std::size_t classes,
                                           dybnn::models::LayerKind activation = dybnn::models::LayerKind::gelu) {
  using namespace dybnn::models;
  LayerGraph g;
  g.input_shape = {in};
  g.num_classes = classes;
  LayerSpec fc1;
  fc1.name = "fc1";
  fc1.kind = LayerKind::linear_fp;
  fc1.inputs = {-1};
  fc1.in_shape = {in};
  fc1.out_shape = {hidden};
  fc1.in_channels = in;
  fc1.out_channels = hidden;
  LayerSpec act;
  act.name = "act";
  act.kind = activation;
  act.inputs = {0};
  act.in_shape = {hidden};
  act.out_shape = {hidden};
  LayerSpec fc2 = fc1;
  fc2.name = "fc2";
  fc2.inputs = {1};
  fc2.in_shape = {hidden};
  fc2.out_shape = {classes};
  fc2.in_channels = hidden;
  fc2.out_channels = classes;
  g.layers = {fc1, act, fc2};
  return g;
}

// A single full-precision linear classifier on flat input.
inline dybnn::models::LayerGraph linear_graph(std::size_t in, std::size_t classes) {
  using namespace dybnn::models;
  LayerGraph g;
  g.input_shape = {in};
  g.num_classes = classes;
  LayerSpec fc;
  fc.name = "fc";
  fc.kind = LayerKind::linear_fp;
  fc.inputs = {-1};
  fc.in_shape = {in};
  fc.out_shape = {classes};
  fc.in_channels = in;
  fc.out_channels = classes;
  g.layers = {fc};
  return g;
}

}  // namespace testsupport
