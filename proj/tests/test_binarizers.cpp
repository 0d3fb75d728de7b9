#include <doctest.h>

#include <cmath>
#include <vector>

#include "dybnn/binarizers.hpp"
#include "support.hpp"

using namespace dybnn;
using namespace dybnn::binarizers;
using testsupport::random_tensor;
using testsupport::sgn;

namespace {

Var<double> leaf(const Tensor<double>& t, bool grad = false) { return Var<double>::leaf(t, grad); }

Hyperfunction<double> hyper(std::size_t c, std::size_t h, std::uint64_t seed, bool gelu = false) {
  return {leaf(random_tensor<double>(Shape{h, c}, seed), true), leaf(random_tensor<double>(Shape{c, h}, seed + 1), true),
          gelu};
}

Hyperfunction<double> zero_hyper(std::size_t c, std::size_t h) {
  return {leaf(Tensor<double>(Shape{h, c}, 0.0)), leaf(Tensor<double>(Shape{c, h}, 0.0)), false};
}

// GAP -> W1 -> (GELU) -> W2 for one statistic vector.
std::vector<double> hyper_oracle(const std::vector<double>& g, const Tensor<double>& w1, const Tensor<double>& w2,
                                 bool gelu) {
  const std::size_t h = w1.dim(0), c = w1.dim(1);
  std::vector<double> mid(h, 0.0), out(c, 0.0);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < c; ++j) mid[i] += w1[i * c + j] * g[j];
    if (gelu) mid[i] = testsupport::gelu(mid[i]);
  }
  for (std::size_t j = 0; j < c; ++j)
    for (std::size_t i = 0; i < h; ++i) out[j] += w2[j * h + i] * mid[i];
  return out;
}

bool all_pm_one(const Tensor<double>& t) {
  for (double v : t.vec())
    if (v != 1.0 && v != -1.0) return false;
  return true;
}

}  // namespace

TEST_CASE("sign treats zero as negative") {
  const auto y = sign(leaf(Tensor<double>(Shape{3}, std::vector<double>{0.3, 0.0, -2.0})));
  CHECK(y.value().vec() == std::vector<double>{1, -1, -1});
}

TEST_CASE("surrogate mode replaces sign with hard-tanh") {
  BinarizeOptions o;
  o.surrogate = true;
  const auto y = sign(leaf(Tensor<double>(Shape{3}, std::vector<double>{0.3, 0.0, -2.0})), o);
  CHECK(y.value().vec() == std::vector<double>{0.3, 0.0, -1.0});
}

TEST_CASE("rsign compares against the per-channel threshold") {
  Tensor<double> x(Shape{1, 2, 1, 1}, std::vector<double>{0.5, 0.5});
  const Tensor<double> a(Shape{2}, std::vector<double>{0.7, 0.2});
  const auto y = rsign(leaf(x), leaf(a), 1);
  CHECK(y.value().vec() == std::vector<double>{-1, 1});
}

TEST_CASE("rsign equals sign of the shifted input and reduces to sign at zero thresholds") {
  const auto x = random_tensor<double>(Shape{3, 4, 5, 5}, 8);
  const auto a = random_tensor<double>(Shape{4}, 9);
  const auto y = rsign(leaf(x), leaf(a), 1).value();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = (i / 25) % 4;
    CHECK(y[i] == sgn(x[i] - a[c]));
  }
  const auto z = rsign(leaf(x), leaf(Tensor<double>(Shape{4}, 0.0)), 1).value();
  CHECK(z == sign(leaf(x)).value());
  CHECK_THROWS_AS(rsign(leaf(x), leaf(Tensor<double>(Shape{3}, 0.0)), 1), DimensionError);
}

TEST_CASE("zero hyperfunction yields zero thresholds and plain sign") {
  const auto x = random_tensor<double>(Shape{2, 16, 4, 4}, 3);
  DySignParams<double> p{zero_hyper(16, 1), 16, ThresholdMode::channel};
  const auto alpha = dysign_thresholds(leaf(x), p).value();
  CHECK(alpha.shape() == Shape{2, 16});
  for (double v : alpha.vec()) CHECK(v == 0.0);
  CHECK(dysign(leaf(x), p).value() == sign(leaf(x)).value());
}

TEST_CASE("constant input through averaging stubs gives a constant threshold") {
  const std::size_t c = 8;
  const Tensor<double> x(Shape{1, c, 3, 3}, 0.75);
  DySignParams<double> p{{leaf(Tensor<double>(Shape{2, c}, 1.0 / c)), leaf(Tensor<double>(Shape{c, 2}, 0.5)), false},
                         4, ThresholdMode::channel};
  const auto alpha = dysign_thresholds(leaf(x), p).value();
  for (double v : alpha.vec()) CHECK(v == doctest::Approx(0.75));
}

TEST_CASE("single-channel threshold straddle") {
  const Tensor<double> x(Shape{1, 1, 1, 2}, std::vector<double>{0.39, 0.41});
  DySignParams<double> p{{leaf(Tensor<double>(Shape{1, 1}, 1.0)), leaf(Tensor<double>(Shape{1, 1}, 1.0)), false}, 1,
                         ThresholdMode::channel};
  Var<double> alpha;
  const auto y = dysign(leaf(x), p, {}, &alpha);
  CHECK(alpha.value()[0] == doctest::Approx(0.4));
  CHECK(y.value().vec() == std::vector<double>{-1, 1});
}

TEST_CASE("channel-wise thresholds match the composed linear oracle per sample") {
  const std::size_t b = 3, c = 16, hw = 9;
  auto x = random_tensor<double>(Shape{b, c, 3, 3}, 21);
  for (std::size_t i = 0; i < hw * c; ++i) x[i] += 0.8;
  DySignParams<double> p{hyper(c, squeeze_width(c, 4), 22), 4, ThresholdMode::channel};
  Var<double> alpha;
  const auto y = dysign(leaf(x), p, {}, &alpha);
  CHECK(all_pm_one(y.value()));
  for (std::size_t n = 0; n < b; ++n) {
    std::vector<double> g(c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t k = 0; k < hw; ++k) g[ch] += x[(n * c + ch) * hw + k];
      g[ch] /= hw;
    }
    const auto a = hyper_oracle(g, p.hyper.w1.value(), p.hyper.w2.value(), false);
    for (std::size_t ch = 0; ch < c; ++ch) {
      CHECK(alpha.value()[n * c + ch] == doctest::Approx(a[ch]).epsilon(1e-12));
      for (std::size_t k = 0; k < hw; ++k) {
        const std::size_t i = (n * c + ch) * hw + k;
        CHECK(y.value()[i] == sgn(x[i] - alpha.value()[n * c + ch]));
      }
    }
  }
  bool differs = false;
  for (std::size_t ch = 0; ch < c; ++ch) differs |= alpha.value()[ch] != alpha.value()[c + ch];
  CHECK(differs);
}

TEST_CASE("token-wise thresholds are constant across the embedding") {
  const std::size_t b = 2, n = 5, d = 8;
  const auto x = random_tensor<double>(Shape{b, n, d}, 31);
  DySignParams<double> p{hyper(n, 2, 32, true), 4, ThresholdMode::token};
  Var<double> alpha;
  const auto y = dysign(leaf(x), p, {}, &alpha);
  REQUIRE(alpha.shape() == Shape{b, n});
  for (std::size_t s = 0; s < b; ++s) {
    std::vector<double> g(n, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t k = 0; k < d; ++k) g[t] += x[(s * n + t) * d + k];
      g[t] /= d;
    }
    const auto a = hyper_oracle(g, p.hyper.w1.value(), p.hyper.w2.value(), true);
    for (std::size_t t = 0; t < n; ++t) {
      CHECK(alpha.value()[s * n + t] == doctest::Approx(a[t]).epsilon(1e-12));
      for (std::size_t k = 0; k < d; ++k) {
        const std::size_t i = (s * n + t) * d + k;
        CHECK(y.value()[i] == sgn(x[i] - a[t]));
      }
    }
  }
}

TEST_CASE("dysign rejects hyperfunctions sized for another width") {
  const auto x = random_tensor<double>(Shape{1, 8, 2, 2}, 1);
  DySignParams<double> p{hyper(4, 1, 2), 4, ThresholdMode::channel};
  CHECK_THROWS_AS(dysign(leaf(x), p), DimensionError);
}

TEST_CASE("hyperfunction weights receive gradient through the threshold") {
  const auto x = random_tensor<double>(Shape{2, 4, 3, 3}, 5, -0.5, 0.5);
  DySignParams<double> p{hyper(4, 1, 6), 4, ThresholdMode::channel};
  backward(ops::sum_all(ops::mul(dysign(leaf(x), p), leaf(random_tensor<double>(x.shape(), 7)))));
  double norm = 0;
  for (double g : p.hyper.w1.grad().vec()) norm += std::abs(g);
  CHECK(norm > 0);
}

TEST_CASE("rprelu degenerates to identity and to the lower branch") {
  PReLUParams<double> p;
  p.beta = leaf(Tensor<double>(Shape{1}, 1.0));
  p.gamma_shift = leaf(Tensor<double>(Shape{1}, 0.0));
  p.zeta_shift = leaf(Tensor<double>(Shape{1}, 0.0));
  const auto x = random_tensor<double>(Shape{2, 1, 3, 3}, 4);
  CHECK(rprelu(leaf(x), p).value() == x);
  p.beta = leaf(Tensor<double>(Shape{1}, 0.25));
  const auto y = dyprelu(leaf(Tensor<double>(Shape{1, 1, 1, 1}, -1.0)), p);
  CHECK(y.value()[0] == doctest::Approx(-0.25));
}

TEST_CASE("dynamic prelu matches the two-stage oracle") {
  const std::size_t b = 2, c = 8, hw = 4;
  const auto x = random_tensor<double>(Shape{b, c, 2, 2}, 41);
  PReLUParams<double> p;
  p.beta = leaf(random_tensor<double>(Shape{c}, 42, 0.0, 0.5));
  p.dynamic = true;
  p.gamma_hyper = hyper(c, 2, 43);
  p.zeta_hyper = hyper(c, 2, 45);
  const auto y = dyprelu(leaf(x), p).value();
  for (std::size_t n = 0; n < b; ++n) {
    std::vector<double> g(c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t k = 0; k < hw; ++k) g[ch] += x[(n * c + ch) * hw + k];
      g[ch] /= hw;
    }
    const auto gs = hyper_oracle(g, p.gamma_hyper.w1.value(), p.gamma_hyper.w2.value(), false);
    const auto zs = hyper_oracle(g, p.zeta_hyper.w1.value(), p.zeta_hyper.w2.value(), false);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t k = 0; k < hw; ++k) {
        const std::size_t i = (n * c + ch) * hw + k;
        const double s = x[i] - gs[ch];
        const double expect = (s > 0 ? s : p.beta.value()[ch] * s) + zs[ch];
        CHECK(y[i] == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("binarize_weights hand example") {
  const Tensor<double> w(Shape{1, 4}, std::vector<double>{1, -1, 2, -2});
  const auto m = binarize_weights(w);
  CHECK(m.u == 0.0);
  CHECK(m.alpha_w == 1.5);
  CHECK(m.packed.bit(0, 0));
  CHECK_FALSE(m.packed.bit(0, 1));
  CHECK(m.packed.bit(0, 2));
  CHECK_FALSE(m.packed.bit(0, 3));
}

TEST_CASE("constant weights binarize to all zero bits") {
  const auto m = binarize_weights(Tensor<double>(Shape{3, 5}, 0.7));
  CHECK(m.u == doctest::Approx(0.7));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 5; ++c) CHECK_FALSE(m.packed.bit(r, c));
  CHECK_THROWS_AS(binarize_weights(Tensor<double>()), ArgumentError);
}

TEST_CASE("scaled binarization approximates weights better than bare sign") {
  Rng rng(99);
  int better = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const double offset = rng.uniform(-0.05, 0.05);
    auto w = random_tensor<double>(Shape{256, 256}, rng.next_u64(), -1.0 / 16, 1.0 / 16);
    for (auto& v : w.vec()) v += offset;
    const auto m = binarize_weights(w);
    double e_scaled = 0, e_bare = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double b = m.packed.value(i / 256, i % 256);
      e_scaled += std::pow(w[i] - m.alpha_w * b, 2);
      e_bare += std::pow(w[i] - sgn(w[i]), 2);
    }
    better += e_scaled < e_bare;
  }
  CHECK(better >= 95);
}

TEST_CASE("binary_linear scales the integer product by mean |W|") {
  const auto x = testsupport::random_pm<double>(Shape{4, 12}, 51);
  const auto w = random_tensor<double>(Shape{6, 12}, 52);
  const auto y = binary_linear(leaf(x), leaf(w)).value();
  double mean = 0, alpha = 0;
  for (double v : w.vec()) mean += v / static_cast<double>(w.size());
  for (double v : w.vec()) alpha += std::abs(v) / static_cast<double>(w.size());
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t o = 0; o < 6; ++o) {
      double acc = 0;
      for (std::size_t k = 0; k < 12; ++k) acc += x[r * 12 + k] * sgn(w[o * 12 + k] - mean);
      CHECK(y[r * 6 + o] == doctest::Approx(alpha * acc).epsilon(1e-12));
    }
}

TEST_CASE("weight scale leaves the argmax of binary_linear unchanged") {
  const auto x = testsupport::random_pm<double>(Shape{8, 20}, 61);
  auto w = random_tensor<double>(Shape{5, 20}, 62);
  const auto y1 = binary_linear(leaf(x), leaf(w)).value();
  for (auto& v : w.vec()) v *= 3.5;
  const auto y2 = binary_linear(leaf(x), leaf(w)).value();
  for (std::size_t r = 0; r < 8; ++r) {
    std::size_t a1 = 0, a2 = 0;
    for (std::size_t o = 1; o < 5; ++o) {
      if (y1[r * 5 + o] > y1[r * 5 + a1]) a1 = o;
      if (y2[r * 5 + o] > y2[r * 5 + a2]) a2 = o;
    }
    CHECK(a1 == a2);
  }
}

TEST_CASE("attention binarized with zero shift is all +1") {
  const std::size_t n = 6;
  Tensor<double> p(Shape{1, 2, n, n});
  auto logits = random_tensor<double>(Shape{2 * n, n}, 70, -4.0, 4.0);
  for (std::size_t r = 0; r < 2 * n; ++r) {
    const auto s = testsupport::softmax(std::vector<double>(logits.vec().begin() + r * n,
                                                            logits.vec().begin() + (r + 1) * n));
    for (std::size_t c = 0; c < n; ++c) p[r * n + c] = s[c];
  }
  const auto y = shifted_attention_sign(leaf(p), leaf(Tensor<double>(Shape{1, 2, n, 1}, 0.0))).value();
  for (double v : y.vec()) CHECK(v == 1.0);
  const auto y2 = shifted_attention_sign(leaf(p), leaf(Tensor<double>(Shape{1, 2, n, 1}, 1.0 / n))).value();
  CHECK(std::count(y2.vec().begin(), y2.vec().end(), -1.0) > 0);
}

TEST_CASE("uniform attention at a 1/N shift maps every entry to -1") {
  const std::size_t n = 4;
  const Tensor<double> p(Shape{1, 1, n, n}, 0.25);
  const auto y = shifted_attention_sign(leaf(p), leaf(Tensor<double>(Shape{1, 1, n, 1}, 0.25))).value();
  for (double v : y.vec()) CHECK(v == -1.0);
}

TEST_CASE("attention rows that do not sum to one are rejected") {
  Tensor<double> p(Shape{1, 1, 2, 2}, 0.5);
  p[0] = 0.6;
  CHECK_THROWS_AS(shifted_attention_sign(leaf(p), leaf(Tensor<double>(Shape{1, 1, 2, 1}, 0.0))), ContractViolation);
}

TEST_CASE("squeeze width never drops below one") {
  CHECK(squeeze_width(256, 16) == 16);
  CHECK(squeeze_width(8, 16) == 1);
  CHECK(squeeze_width(20, 8) == 3);
  CHECK_THROWS_AS(squeeze_width(16, 0), ArgumentError);
}

TEST_CASE("surrogate mode carries exact gradients into the hyperfunction weights") {
  BinarizeOptions o;
  o.surrogate = true;
  const auto x = random_tensor<double>(Shape{2, 8, 3, 3}, 40, -0.3, 0.3);
  const auto r = random_tensor<double>(Shape{2, 8, 3, 3}, 41);
  DySignParams<double> p{{leaf(random_tensor<double>(Shape{2, 8}, 42, -0.1, 0.1), true),
                          leaf(random_tensor<double>(Shape{8, 2}, 43, -0.1, 0.1), true), true},
                         4, ThresholdMode::channel};
  auto loss = [&] { return ops::sum_all(ops::mul(dysign(leaf(x), p, o), leaf(r))); };
  const auto l = loss();
  // Inputs and thresholds stay inside (-1, 1), so hard-tanh is the identity here.
  CHECK(l.value()[0] != 0.0);
  backward(l);
  const double eps = 1e-6;
  for (Var<double>* w : {&p.hyper.w1, &p.hyper.w2}) {
    const auto analytic = w->grad();
    for (std::size_t i = 0; i < w->value().size(); ++i) {
      const double saved = w->value()[i];
      w->mutable_value()[i] = saved + eps;
      const double up = loss().value()[0];
      w->mutable_value()[i] = saved - eps;
      const double down = loss().value()[0];
      w->mutable_value()[i] = saved;
      CHECK(analytic[i] == doctest::Approx((up - down) / (2 * eps)).epsilon(1e-6));
    }
  }
}
