#include "dybnn/layer_graph.hpp"

#include <array>
#include <utility>

#include "dybnn/bitkernel.hpp"

namespace dybnn::models {

namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 22> kKindNames{{
    {LayerKind::conv_fp, "conv_fp"},
    {LayerKind::conv_binary, "conv_binary"},
    {LayerKind::linear_fp, "linear_fp"},
    {LayerKind::linear_binary, "linear_binary"},
    {LayerKind::sign, "sign"},
    {LayerKind::rsign, "rsign"},
    {LayerKind::dysign, "dysign"},
    {LayerKind::rprelu, "rprelu"},
    {LayerKind::dyprelu, "dyprelu"},
    {LayerKind::batchnorm, "batchnorm"},
    {LayerKind::layernorm, "layernorm"},
    {LayerKind::gelu, "gelu"},
    {LayerKind::relu, "relu"},
    {LayerKind::maxpool, "maxpool"},
    {LayerKind::avgpool, "avgpool"},
    {LayerKind::mhsa_binary, "mhsa_binary"},
    {LayerKind::ffn_binary, "ffn_binary"},
    {LayerKind::seqpool, "seqpool"},
    {LayerKind::residual_add, "residual_add"},
    {LayerKind::duplicate_concat, "duplicate_concat"},
    {LayerKind::flatten_tokens, "flatten_tokens"},
    {LayerKind::pos_embed, "pos_embed"},
}};

[[noreturn]] void bad_value(std::string_view what, std::string_view value) {
  throw ConfigError("unknown " + std::string(what) + " '" + std::string(value) + "'");
}

void expect_rank(const LayerSpec& s, const Shape& in, std::size_t rank) {
  if (in.size() != rank) {
    throw DimensionError("layer '" + s.name + "' expects rank-" + std::to_string(rank) + " input, got " +
                         shape_str(in));
  }
}

}  // namespace

std::string_view to_string(LayerKind k) {
  for (const auto& [kind, name] : kKindNames) {
    if (kind == k) return name;
  }
  return "?";
}

LayerKind layer_kind_from(std::string_view s) {
  for (const auto& [kind, name] : kKindNames) {
    if (name == s) return kind;
  }
  bad_value("layer kind", s);
}

std::string_view to_string(BinarizerKind k) {
  switch (k) {
    case BinarizerKind::sign: return "sign";
    case BinarizerKind::rsign: return "rsign";
    case BinarizerKind::dysign: return "dysign";
  }
  return "?";
}

BinarizerKind binarizer_from(std::string_view s) {
  if (s == "sign") return BinarizerKind::sign;
  if (s == "rsign") return BinarizerKind::rsign;
  if (s == "dysign") return BinarizerKind::dysign;
  bad_value("binarizer", s);
}

std::string_view to_string(ActivationKind k) { return k == ActivationKind::rprelu ? "rprelu" : "dyprelu"; }

ActivationKind activation_from(std::string_view s) {
  if (s == "rprelu") return ActivationKind::rprelu;
  if (s == "dyprelu") return ActivationKind::dyprelu;
  bad_value("activation", s);
}

std::string_view to_string(binarizers::ThresholdMode m) {
  return m == binarizers::ThresholdMode::channel ? "channel" : "token";
}

binarizers::ThresholdMode threshold_mode_from(std::string_view s) {
  if (s == "channel") return binarizers::ThresholdMode::channel;
  if (s == "token") return binarizers::ThresholdMode::token;
  bad_value("threshold mode", s);
}

std::string_view to_string(ShiftShape s) { return s == ShiftShape::per_query ? "per_query" : "full"; }

ShiftShape shift_shape_from(std::string_view s) {
  if (s == "per_query") return ShiftShape::per_query;
  if (s == "full") return ShiftShape::full;
  bad_value("attention shift shape", s);
}

bool is_binarizer(LayerKind k) { return k == LayerKind::sign || k == LayerKind::rsign || k == LayerKind::dysign; }

std::vector<std::string> mhsa_sites() { return {"in", "q", "k", "v", "ctx"}; }
std::vector<std::string> ffn_sites() { return {"in", "mid"}; }

std::size_t site_channels(const Shape& site_input, binarizers::ThresholdMode mode) {
  if (site_input.size() == 3) return site_input[0];  // NCHW per-sample: C
  if (site_input.size() == 2) return mode == binarizers::ThresholdMode::token ? site_input[0] : site_input[1];
  throw DimensionError("binarizer site input must be CHW or [N, D], got " + shape_str(site_input));
}

Shape infer_shape(const LayerSpec& s, const std::vector<Shape>& in) {
  if (in.empty()) throw DimensionError("layer '" + s.name + "' has no inputs");
  const Shape& x = in[0];
  switch (s.kind) {
    case LayerKind::conv_fp:
    case LayerKind::conv_binary: {
      expect_rank(s, x, 3);
      if (x[0] != s.in_channels) {
        throw DimensionError("layer '" + s.name + "' expects " + std::to_string(s.in_channels) + " channels, got " +
                             shape_str(x));
      }
      return {s.out_channels, bitkernel::conv_out_extent(x[1], s.kernel, s.stride, s.padding),
              bitkernel::conv_out_extent(x[2], s.kernel, s.stride, s.padding)};
    }
    case LayerKind::linear_fp:
    case LayerKind::linear_binary: {
      if (x.back() != s.in_channels) {
        throw DimensionError("layer '" + s.name + "' expects feature width " + std::to_string(s.in_channels) +
                             ", got " + shape_str(x));
      }
      Shape out = x;
      out.back() = s.out_channels;
      return out;
    }
    case LayerKind::maxpool: {
      expect_rank(s, x, 3);
      return {x[0], bitkernel::conv_out_extent(x[1], s.kernel, s.stride, s.padding),
              bitkernel::conv_out_extent(x[2], s.kernel, s.stride, s.padding)};
    }
    case LayerKind::avgpool: {
      expect_rank(s, x, 3);
      if (s.global) return {x[0]};
      if (x[1] % s.stride != 0 || x[2] % s.stride != 0) {
        throw ConfigError("layer '" + s.name + "': stride " + std::to_string(s.stride) + " does not divide map " +
                          shape_str(x));
      }
      return {x[0], bitkernel::conv_out_extent(x[1], s.kernel, s.stride, 0),
              bitkernel::conv_out_extent(x[2], s.kernel, s.stride, 0)};
    }
    case LayerKind::residual_add: {
      if (in.size() != 2 || in[0] != in[1]) {
        throw DimensionError("layer '" + s.name + "' adds mismatched shapes " + shape_str(in[0]) + " and " +
                             (in.size() > 1 ? shape_str(in[1]) : std::string("<none>")));
      }
      return x;
    }
    case LayerKind::duplicate_concat: {
      Shape out = x;
      out[0] *= 2;
      return out;
    }
    case LayerKind::flatten_tokens:
      expect_rank(s, x, 3);
      return {x[1] * x[2], x[0]};
    case LayerKind::pos_embed:
    case LayerKind::mhsa_binary:
    case LayerKind::ffn_binary:
      expect_rank(s, x, 2);
      if (s.kind == LayerKind::mhsa_binary && (s.heads == 0 || x[1] % s.heads != 0)) {
        throw ConfigError("layer '" + s.name + "': embedding " + std::to_string(x[1]) + " not divisible by " +
                          std::to_string(s.heads) + " heads");
      }
      return x;
    case LayerKind::seqpool:
      expect_rank(s, x, 2);
      return {x[1]};
    default:
      return x;  // elementwise kinds
  }
}

void LayerGraph::validate() const {
  if (layers.empty()) throw ConfigError("empty layer graph");
  if (!layers.front().full_precision || !layers.back().full_precision) {
    throw ConfigError("first and last layers must be full precision");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& s = layers[i];
    std::vector<Shape> in;
    for (int src : s.inputs) {
      if (src >= static_cast<int>(i)) throw ConfigError("layer '" + s.name + "' reads a later layer");
      in.push_back(src < 0 ? input_shape : layers[static_cast<std::size_t>(src)].out_shape);
    }
    if (in.empty() || in[0] != s.in_shape) {
      throw DimensionError("layer '" + s.name + "' declared input " + shape_str(s.in_shape) + " but receives " +
                           (in.empty() ? std::string("nothing") : shape_str(in[0])));
    }
    const Shape out = infer_shape(s, in);
    if (out != s.out_shape) {
      throw DimensionError("layer '" + s.name + "' declared output " + shape_str(s.out_shape) + " but computes " +
                           shape_str(out));
    }
  }
  if (layers.back().out_shape != Shape{num_classes}) {
    throw DimensionError("graph output " + shape_str(layers.back().out_shape) + " does not match " +
                         std::to_string(num_classes) + " classes");
  }
}

std::vector<LayerKind> LayerGraph::kinds() const {
  std::vector<LayerKind> k;
  for (const auto& l : layers) k.push_back(l.kind);
  return k;
}

int LayerGraph::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

}  // namespace dybnn::models
