#include "dybnn/costmodel.hpp"

#include <cmath>

#include "dybnn/binarizers.hpp"
#include "dybnn/error.hpp"
#include "dybnn/models.hpp"

namespace dybnn::cost {

using models::LayerKind;
using models::LayerSpec;

namespace {

std::uint64_t site_overhead(const LayerSpec& s, const Shape& site_input) {
  if (s.site_binarizer != models::BinarizerKind::dysign) return 0;
  return dysign_overhead(models::site_channels(site_input, s.mode), s.gamma);
}

std::uint64_t param_count(const LayerSpec& s) {
  models::ParamStore<float> store;
  models::init_layer_params(store, s, 0);
  return store.scalar_count();
}

LayerCost count_layer(const LayerSpec& s, const Shape& in, const Shape& out, CostConvention conv) {
  LayerCost c{s.name, std::string(models::to_string(s.kind)), 0, 0, 0};
  const bool ew = conv == CostConvention::elementwise;
  const std::uint64_t out_n = numel(out);
  switch (s.kind) {
    case LayerKind::conv_fp:
      c.flops = out_n * s.in_channels * s.kernel * s.kernel;
      break;
    case LayerKind::conv_binary:
      c.bops = out_n * s.in_channels * s.kernel * s.kernel;
      break;
    case LayerKind::linear_fp:
      c.flops = out_n * s.in_channels;
      break;
    case LayerKind::linear_binary:
      c.bops = out_n * s.in_channels;
      if (ew) c.flops = out_n;
      break;
    case LayerKind::dysign:
      c.flops = dysign_overhead(s.in_channels, s.gamma);
      break;
    case LayerKind::rprelu:
      if (ew) c.flops = out_n;
      break;
    case LayerKind::dyprelu:
      c.flops = 2 * dysign_overhead(s.in_channels, s.gamma) + (ew ? out_n : 0);
      break;
    case LayerKind::batchnorm:
    case LayerKind::layernorm:
    case LayerKind::gelu:
      if (ew) c.flops = out_n;
      break;
    case LayerKind::mhsa_binary: {
      const std::uint64_t n = in[0], d = in[1], h = s.heads;
      c.bops = 4 * n * d * d + 2 * n * n * d;
      if (ew) c.flops = h * n * n + 4 * h * n * n + 5 * n * d;  // score scale, softmax, output scales
      for (std::size_t i = 0; i < models::mhsa_sites().size(); ++i) c.flops += site_overhead(s, in);
      break;
    }
    case LayerKind::ffn_binary: {
      const std::uint64_t n = in[0], d = in[1], hd = s.hidden;
      c.bops = 2 * n * d * hd;
      if (ew) c.flops = n * hd + n * hd + n * d;  // GELU, output scales
      c.flops += site_overhead(s, in) + site_overhead(s, Shape{n, hd});
      break;
    }
    case LayerKind::seqpool: {
      const std::uint64_t n = in[0], d = in[1];
      c.flops = 2 * n * d + (ew ? 4 * n : 0);
      break;
    }
    default:
      break;
  }
  c.params = param_count(s);
  return c;
}

}  // namespace

std::string to_string(CostConvention c) { return c == CostConvention::elementwise ? "elementwise" : "matmul_only"; }

CostConvention convention_from(const std::string& s) {
  if (s == "elementwise") return CostConvention::elementwise;
  if (s == "matmul_only") return CostConvention::matmul_only;
  throw ConfigError("unknown cost convention '" + s + "'");
}

CostConvention default_convention(const models::LayerGraph& g) {
  for (const auto& l : g.layers) {
    if (l.kind == LayerKind::seqpool || l.kind == LayerKind::mhsa_binary) return CostConvention::matmul_only;
  }
  return CostConvention::elementwise;
}

double combine_ops(std::uint64_t bops, std::uint64_t flops) {
  return static_cast<double>(bops) / 64.0 + static_cast<double>(flops);
}

std::uint64_t dysign_overhead(std::uint64_t channels, std::uint64_t gamma) {
  if (channels == 0 || gamma == 0) throw ArgumentError("dysign_overhead: channels and gamma must be positive");
  const std::uint64_t h = binarizers::squeeze_width(channels, gamma);
  return channels + 2 * channels * h;
}

CostReport count_ops(const models::LayerGraph& g, std::optional<CostConvention> convention,
                     std::optional<Shape> input_shape) {
  CostReport r;
  r.convention = convention.value_or(default_convention(g));
  const Shape input = input_shape.value_or(g.input_shape);
  std::vector<Shape> shapes;
  for (const auto& s : g.layers) {
    std::vector<Shape> in;
    for (int src : s.inputs) {
      if (src >= static_cast<int>(shapes.size())) throw ConfigError("layer '" + s.name + "' reads a later layer");
      in.push_back(src < 0 ? input : shapes[static_cast<std::size_t>(src)]);
    }
    Shape out;
    try {
      out = models::infer_shape(s, in);
    } catch (const DimensionError& e) {
      throw ConfigError(std::string("cannot resolve shapes: ") + e.what());
    }
    LayerCost c = count_layer(s, in.at(0), out, r.convention);
    r.bops += c.bops;
    r.flops += c.flops;
    r.params += c.params;
    r.layers.push_back(std::move(c));
    shapes.push_back(std::move(out));
  }
  r.ops = combine_ops(r.bops, r.flops);
  return r;
}

double ReferenceRow::identity_gap() const { return std::abs(ops - (bops / 64.0 + flops)) / ops; }

std::vector<ReferenceRow> reference_rows() {
  return {
      {"ReActNet", 4.82e9, 0.22e8, 0.97e8},
      {"DyBCNN", 4.82e9, 0.24e8, 0.99e8},
      {"Bi-RealNet-18", 1.68e9, 1.39e8, 1.63e8},
      {"BinaryCCT_6", 1.01e9, 7.23e6, 22.96e6},
      {"DyBinaryCCT_6", 1.01e9, 11.16e6, 26.89e6},
      {"BinaryCCT_7", 1.17e9, 7.23e6, 25.59e6},
      {"DyBinaryCCT_7", 1.17e9, 11.81e6, 30.17e6},
  };
}

std::optional<ReferenceRow> reference_for(const std::string& preset) {
  static const std::pair<const char*, const char*> kMap[] = {
      {"reactnet", "ReActNet"},           {"dybcnn", "DyBCNN"},
      {"binarycct_6", "BinaryCCT_6"},     {"dybinarycct_6", "DyBinaryCCT_6"},
      {"binarycct_7", "BinaryCCT_7"},     {"dybinarycct_7", "DyBinaryCCT_7"},
  };
  for (const auto& [p, m] : kMap) {
    if (preset != p) continue;
    for (const auto& row : reference_rows()) {
      if (row.model == m) return row;
    }
  }
  return std::nullopt;
}

}  // namespace dybnn::cost
