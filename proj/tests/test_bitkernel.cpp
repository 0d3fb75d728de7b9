#include <doctest.h>

#include <vector>

#include "dybnn/bitkernel.hpp"
#include "dybnn/ops.hpp"
#include "support.hpp"

using namespace dybnn;
using namespace dybnn::bitkernel;
using testsupport::random_pm;
using testsupport::random_tensor;

namespace {

std::vector<double> as_double(const Tensor<float>& t) { return {t.vec().begin(), t.vec().end()}; }

}  // namespace

TEST_CASE("pack_signs maps positives to 1 and non-positives to 0") {
  const Tensor<float> m(Shape{1, 3}, std::vector<float>{0.3f, -1.2f, 0.0f});
  const auto p = pack_signs(m);
  CHECK(p.bit(0, 0));
  CHECK_FALSE(p.bit(0, 1));
  CHECK_FALSE(p.bit(0, 2));
  CHECK(p.tail_clean());
}

TEST_CASE("a positive row of 64 fills one word") {
  const Tensor<float> m(Shape{1, 64}, 2.0f);
  const auto p = pack_signs(m);
  REQUIRE(p.words_per_row() == 1);
  CHECK(p.row(0)[0] == ~Word{0});
  CHECK(tail_mask_for(64) == ~Word{0});
  CHECK(tail_mask_for(65) == Word{1});
}

TEST_CASE("unpack inverts pack_signs on +-1 matrices") {
  const auto m = random_pm<float>(Shape{7, 131}, 4);
  CHECK(unpack<float>(pack_signs(m)) == m);
}

TEST_CASE("xnor_popcount_dot hand examples") {
  const Tensor<float> a(Shape{1, 4}, std::vector<float>{1, -1, 1, -1});
  const Tensor<float> b(Shape{1, 4}, std::vector<float>{1, 1, -1, -1});
  const auto pa = pack_signs(a), pb = pack_signs(b);
  CHECK(xnor_popcount_dot(pa.row(0), pb.row(0), 4) == 0);
  for (std::size_t n : {1u, 63u, 64u, 65u, 200u}) {
    const auto r = pack_signs(random_pm<float>(Shape{1, n}, n));
    CHECK(xnor_popcount_dot(r.row(0), r.row(0), n) == static_cast<std::int64_t>(n));
  }
}

TEST_CASE("xnor_popcount_dot rejects rows of different lengths") {
  const auto a = pack_signs(random_pm<float>(Shape{1, 70}, 1));
  const auto b = pack_signs(random_pm<float>(Shape{1, 10}, 2));
  CHECK_THROWS_AS(xnor_popcount_dot(a.row(0), b.row(0), 70), DimensionError);
}

TEST_CASE("10000 random dot products match the float oracle and have the parity of n") {
  Rng rng(77);
  for (int t = 0; t < 10000; ++t) {
    const std::size_t n = 1 + rng.below(513);
    const auto a = random_tensor<float>(Shape{1, n}, rng.next_u64());
    const auto b = random_tensor<float>(Shape{1, n}, rng.next_u64());
    const auto expect = testsupport::sign_gemm_nt(as_double(a), as_double(b), 1, 1, n)[0];
    const auto got = xnor_popcount_dot(pack_signs(a).row(0), pack_signs(b).row(0), n);
    REQUIRE(got == expect);
    REQUIRE(((got % 2) + 2) % 2 == static_cast<std::int64_t>(n % 2));
  }
}

TEST_CASE("binary_gemm matches the float oracle") {
  const auto a = random_tensor<float>(Shape{128, 96}, 5);
  const auto bt = random_tensor<float>(Shape{64, 96}, 6);
  const auto out = binary_gemm(pack_signs(a), pack_signs(bt));
  REQUIRE(out.rows == 128);
  REQUIRE(out.cols == 64);
  const auto expect = testsupport::sign_gemm_nt(as_double(a), as_double(bt), 128, 64, 96);
  for (std::size_t i = 0; i < expect.size(); ++i) REQUIRE(out.data[i] == expect[i]);
}

TEST_CASE("self-product of a +-1 matrix has n on the diagonal") {
  const std::size_t n = 77;
  const auto a = random_pm<float>(Shape{9, n}, 8);
  const auto p = pack_signs(a);
  const auto out = binary_gemm(p, p);
  for (std::size_t i = 0; i < 9; ++i) CHECK(out.at(i, i) == static_cast<std::int32_t>(n));
}

TEST_CASE("binary_gemm rejects an inner dimension mismatch") {
  const auto a = pack_signs(random_pm<float>(Shape{2, 10}, 1));
  const auto b = pack_signs(random_pm<float>(Shape{2, 11}, 2));
  CHECK_THROWS_AS(binary_gemm(a, b), DimensionError);
}

TEST_CASE("corrupted tail bits do not change results") {
  const std::size_t n = 70;
  const auto a = random_tensor<float>(Shape{5, n}, 31);
  const auto b = random_tensor<float>(Shape{4, n}, 32);
  auto pa = pack_signs(a), pb = pack_signs(b);
  const auto clean = binary_gemm(pa, pb);
  const Word junk = ~tail_mask_for(n);
  for (std::size_t r = 0; r < pa.rows(); ++r) pa.row(r).back() |= junk;
  for (std::size_t r = 0; r < pb.rows(); ++r) pb.row(r).back() ^= junk;
  CHECK_FALSE(pa.tail_clean());
  CHECK(binary_gemm(pa, pb).data == clean.data);
  CHECK(xnor_popcount_dot(pa.row(0), pb.row(0), n) == clean.at(0, 0));
}

TEST_CASE("1x1 all-ones kernel over an all-ones input gives ones") {
  const Tensor<float> x(Shape{1, 1, 4, 4}, 1.0f);
  const Tensor<float> w(Shape{1, 1, 1, 1}, 1.0f);
  const auto y = binary_conv2d(x, w, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 4, 4});
  for (float v : y.vec()) CHECK(v == 1.0f);
}

TEST_CASE("padding reads as -1 so a 3x3 corner sees four +1 and five -1") {
  const Tensor<float> x(Shape{1, 1, 5, 5}, 1.0f);
  const Tensor<float> w(Shape{1, 1, 3, 3}, 1.0f);
  const auto y = binary_conv2d(x, w, 1, 1);
  CHECK(y.vec()[0] == -1.0f);
  CHECK(y.vec()[2] == 3.0f);
  CHECK(y.vec()[12] == 9.0f);
}

TEST_CASE("binary_conv2d matches direct convolution") {
  struct Case {
    std::size_t stride, pad;
  };
  for (const Case c : {Case{1, 1}, Case{2, 0}, Case{2, 1}, Case{1, 0}}) {
    const auto x = random_tensor<float>(Shape{8, 3, 16, 16}, 40 + c.stride + c.pad);
    const auto w = random_tensor<float>(Shape{12, 3, 3, 3}, 50 + c.stride + c.pad);
    std::size_t oh = 0, ow = 0;
    const auto expect =
        testsupport::sign_conv_direct(as_double(x), as_double(w), 8, 3, 16, 16, 12, 3, 3, c.stride, c.pad, oh, ow);
    const auto y = binary_conv2d(x, w, c.stride, c.pad);
    REQUIRE(y.shape() == Shape{8, 12, oh, ow});
    for (std::size_t i = 0; i < expect.size(); ++i) REQUIRE(static_cast<double>(y[i]) == expect[i]);
  }
}

TEST_CASE("a kernel larger than the padded input is rejected") {
  const Tensor<float> x(Shape{1, 1, 2, 2}, 1.0f);
  const Tensor<float> w(Shape{1, 1, 5, 5}, 1.0f);
  CHECK_THROWS_AS(binary_conv2d(x, w, 1, 1), DimensionError);
  CHECK_THROWS_AS(conv_out_extent(2, 5, 1, 1), DimensionError);
  CHECK(conv_out_extent(32, 3, 2, 1) == 16);
}

TEST_CASE("packed ops agree with their dense counterparts") {
  const auto x = random_pm<float>(Shape{6, 100}, 61);
  const auto w = random_pm<float>(Shape{9, 100}, 62);
  const auto dense = ops::linear(Var<float>::leaf(x), Var<float>::leaf(w), false).value();
  const auto packed = ops::linear(Var<float>::leaf(x), Var<float>::leaf(w), true).value();
  CHECK(dense == packed);

  const auto xi = random_pm<float>(Shape{2, 4, 9, 9}, 63);
  const auto wk = random_pm<float>(Shape{5, 4, 3, 3}, 64);
  const auto cd = ops::conv2d(Var<float>::leaf(xi), Var<float>::leaf(wk), 2, 1, -1.0, false).value();
  const auto cp = ops::conv2d(Var<float>::leaf(xi), Var<float>::leaf(wk), 2, 1, -1.0, true).value();
  CHECK(cd == cp);
}

TEST_CASE("packed linear refuses non-binary operands") {
  const auto x = random_tensor<float>(Shape{2, 8}, 1);
  const auto w = random_pm<float>(Shape{3, 8}, 2);
  CHECK_THROWS_AS(ops::linear(Var<float>::leaf(x), Var<float>::leaf(w), true), ContractViolation);
}
