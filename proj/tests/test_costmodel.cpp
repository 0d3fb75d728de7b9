#include <doctest.h>

#include <cmath>

#include "dybnn/costmodel.hpp"
#include "dybnn/models.hpp"
#include "support.hpp"

using namespace dybnn;
using namespace dybnn::models;
using namespace dybnn::cost;

namespace {

void check_identity(const CostReport& r) {
  CHECK(r.ops == static_cast<double>(r.bops) / 64.0 + static_cast<double>(r.flops));
  std::uint64_t b = 0, f = 0, p = 0;
  for (const auto& l : r.layers) {
    b += l.bops;
    f += l.flops;
    p += l.params;
  }
  CHECK(b == r.bops);
  CHECK(f == r.flops);
  CHECK(p == r.params);
}

// Hand count of one input-conditioned threshold site: GAP over C statistics,
// then a C -> h and an h -> C matrix-vector product.
std::uint64_t hand_overhead(std::uint64_t c, std::uint64_t gamma) {
  const auto h = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(double(c) / double(gamma))));
  return c + c * h + h * c;
}

// Stem + one same-width block at C channels over a 4x4 map.
DyBcnnConfig single_site(std::size_t c, BinarizerKind b, ActivationKind a) {
  DyBcnnConfig cfg;
  cfg.image = 4;
  cfg.stem_channels = c;
  cfg.units = {{c, 3, 1}};
  cfg.binarizer = b;
  cfg.activation = a;
  return cfg;
}

}  // namespace

TEST_CASE("published operation totals combine binary and float counts") {
  CHECK(combine_ops(4'820'000'000ULL, 22'000'000ULL) == doctest::Approx(0.97e8).epsilon(0.01));
  CHECK(combine_ops(1'010'000'000ULL, 7'230'000ULL) == doctest::Approx(2.30e7).epsilon(0.01));
}

TEST_CASE("reactnet preset reproduces its reference row") {
  const auto r = count_ops(build_dybcnn(reactnet_a()));
  CHECK(r.convention == CostConvention::elementwise);
  CHECK(static_cast<double>(r.bops) == doctest::Approx(4.82e9).epsilon(0.01));
  CHECK(r.ops == doctest::Approx(0.97e8).epsilon(0.02));
  check_identity(r);
}

TEST_CASE("six-layer binary transformer reproduces its reference row") {
  const auto r = count_ops(build_dybinarycct(binarycct(6)));
  CHECK(r.convention == CostConvention::matmul_only);
  CHECK(static_cast<double>(r.bops) == doctest::Approx(1.01e9).epsilon(0.01));
  CHECK(r.ops == doctest::Approx(22.96e6).epsilon(0.03));
  check_identity(r);
}

TEST_CASE("a full-precision graph has no binary operations") {
  const auto r = count_ops(testsupport::mlp_graph(10, 20, 5));
  CHECK(r.bops == 0);
  CHECK(r.ops == static_cast<double>(r.flops));
  CHECK(r.flops >= 10 * 20 + 20 * 5);
  check_identity(r);
}

TEST_CASE("dysign overhead formula") {
  CHECK(dysign_overhead(256, 16) == 8448);
  CHECK(dysign_overhead(16, 16) == 48);
  CHECK(dysign_overhead(64, 16) == 64 + 64 * 64 / 8);
  for (std::uint64_t c : {3u, 16u, 20u, 64u, 256u, 384u})
    for (std::uint64_t g : {1u, 4u, 16u}) CHECK(dysign_overhead(c, g) == hand_overhead(c, g));
  CHECK_THROWS_AS(dysign_overhead(0, 16), ArgumentError);
  CHECK_THROWS_AS(dysign_overhead(16, 0), ArgumentError);
}

TEST_CASE("switching one site to dysign adds exactly its overhead") {
  for (std::size_t c : {16u, 64u, 256u}) {
    const auto base = count_ops(build_dybcnn(single_site(c, BinarizerKind::sign, ActivationKind::rprelu)));
    const auto dys = count_ops(build_dybcnn(single_site(c, BinarizerKind::dysign, ActivationKind::rprelu)));
    const auto both = count_ops(build_dybcnn(single_site(c, BinarizerKind::dysign, ActivationKind::dyprelu)));
    const std::uint64_t per_site = c + c * c / 8;
    CHECK(dys.flops - base.flops == per_site);
    CHECK(both.flops - dys.flops == 2 * per_site);
    CHECK(dys.bops == base.bops);
  }
}

TEST_CASE("sign to dysign delta equals the summed site overheads") {
  auto s = dybcnn_micro();
  s.binarizer = BinarizerKind::sign;
  s.activation = ActivationKind::rprelu;
  auto d = s;
  d.binarizer = BinarizerKind::dysign;
  d.activation = ActivationKind::dyprelu;
  const auto gs = build_dybcnn(s), gd = build_dybcnn(d);
  std::uint64_t expect = 0;
  for (const auto& l : gd.layers) {
    if (l.kind == LayerKind::dysign) expect += dysign_overhead(l.in_shape[0], l.gamma);
    if (l.kind == LayerKind::dyprelu) expect += 2 * dysign_overhead(l.in_shape[0], l.gamma);
  }
  CHECK(count_ops(gd).flops - count_ops(gs).flops == expect);

  auto cs = dybinarycct_2();
  cs.binarizer = BinarizerKind::sign;
  auto cd = cs;
  cd.binarizer = BinarizerKind::dysign;
  const auto ts = build_dybinarycct(cs), td = build_dybinarycct(cd);
  std::uint64_t cct_expect = 0;
  for (const auto& l : td.layers) {
    if (l.kind == LayerKind::mhsa_binary) cct_expect += 5 * dysign_overhead(l.in_shape[0], l.gamma);
    if (l.kind == LayerKind::ffn_binary) cct_expect += 2 * dysign_overhead(l.in_shape[0], l.gamma);
  }
  CHECK(count_ops(td).flops - count_ops(ts).flops == cct_expect);
}

TEST_CASE("adding layers never decreases any count") {
  auto cfg = dybcnn_micro();
  const auto units = cfg.units;
  CostReport prev;
  for (std::size_t k = 1; k <= units.size(); ++k) {
    cfg.units.assign(units.begin(), units.begin() + static_cast<long>(k));
    const auto r = count_ops(build_dybcnn(cfg));
    CHECK(r.bops >= prev.bops);
    CHECK(r.flops >= prev.flops);
    CHECK(r.params >= prev.params);
    prev = r;
  }
  auto cc = dybinarycct_2();
  CostReport cprev;
  for (std::size_t l = 0; l <= 3; ++l) {
    cc.layers = l;
    const auto r = count_ops(build_dybinarycct(cc));
    CHECK(r.bops >= cprev.bops);
    CHECK(r.flops >= cprev.flops);
    CHECK(r.params >= cprev.params);
    check_identity(r);
    cprev = r;
  }
}

TEST_CASE("an empty encoder contributes no binary operations") {
  auto c = dybinarycct_2();
  c.layers = 0;
  CHECK(count_ops(build_dybinarycct(c)).bops == 0);
}

TEST_CASE("binary operation counts follow the layer geometry") {
  const auto r = count_ops(build_dybcnn(dybcnn_micro()));
  std::uint64_t expect = 0;
  for (const auto& l : build_dybcnn(dybcnn_micro()).layers) {
    if (l.kind != LayerKind::conv_binary) continue;
    expect += static_cast<std::uint64_t>(l.out_shape[0] * l.out_shape[1] * l.out_shape[2]) * l.in_channels *
              l.kernel * l.kernel;
  }
  CHECK(r.bops == expect);
}

TEST_CASE("unresolvable input shapes are a config error") {
  CHECK_THROWS_AS(count_ops(build_dybcnn(dybcnn_micro()), std::nullopt, Shape{3, 9, 9}), ConfigError);
  const auto r = count_ops(build_dybcnn(dybcnn_micro()), std::nullopt, Shape{3, 16, 16});
  CHECK(r.bops * 4 == count_ops(build_dybcnn(dybcnn_micro())).bops);
}

TEST_CASE("conventions are selected per graph family and can be overridden") {
  const auto cnn = build_dybcnn(dybcnn_micro());
  const auto cct = build_dybinarycct(dybinarycct_2());
  CHECK(default_convention(cnn) == CostConvention::elementwise);
  CHECK(default_convention(cct) == CostConvention::matmul_only);
  const auto a = count_ops(cct, CostConvention::elementwise);
  const auto b = count_ops(cct, CostConvention::matmul_only);
  CHECK(a.flops > b.flops);
  CHECK(a.bops == b.bops);
  CHECK(convention_from(to_string(CostConvention::matmul_only)) == CostConvention::matmul_only);
  CHECK_THROWS_AS(convention_from("per_mac"), ConfigError);
}

TEST_CASE("reference rows are listed for the published presets") {
  CHECK(reference_for("reactnet").has_value());
  CHECK(reference_for("binarycct_6").has_value());
  CHECK_FALSE(reference_for("dybcnn_micro").has_value());
  for (const auto& row : reference_rows()) CHECK(std::isfinite(row.identity_gap()));
}
