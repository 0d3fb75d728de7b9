#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dybnn/layer_graph.hpp"

// Operation accounting: binary multiply-accumulates (BOPs), floating point
// operations (FLOPs) and OPs = BOPs / 64 + FLOPs. One multiply-accumulate
// counts as one operation.
namespace dybnn::cost {

// Which floating point work is counted besides full-precision MACs and
// threshold hyperfunctions.
//  elementwise: batchnorm, PReLU, layernorm, GELU and output scaling at one
//    FLOP per element, softmax at four; sign, ReLU, pooling and residual adds
//    are free.
//  matmul_only: full-precision conv / linear / sequence-pooling MACs only.
enum class CostConvention { elementwise, matmul_only };

std::string to_string(CostConvention c);
CostConvention convention_from(const std::string& s);
// matmul_only for transformer graphs, elementwise otherwise.
CostConvention default_convention(const models::LayerGraph& g);

struct LayerCost {
  std::string name;
  std::string kind;
  std::uint64_t bops = 0;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
};

struct CostReport {
  CostConvention convention = CostConvention::elementwise;
  std::vector<LayerCost> layers;
  std::uint64_t bops = 0;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
  double ops = 0;
};

double combine_ops(std::uint64_t bops, std::uint64_t flops);

// FLOPs of one threshold hyperfunction over C channels: GAP (C) plus the two
// maps C -> h -> C with h = max(1, round(C / gamma)); C + C^2/8 at gamma 16.
std::uint64_t dysign_overhead(std::uint64_t channels, std::uint64_t gamma);

// Counts every layer of `g`, re-deriving shapes from `input_shape` (the
// graph's own input shape when absent). Unresolvable shapes raise ConfigError.
CostReport count_ops(const models::LayerGraph& g, std::optional<CostConvention> convention = std::nullopt,
                     std::optional<Shape> input_shape = std::nullopt);

// Published operation counts for comparison in reports.
struct ReferenceRow {
  std::string model;
  double bops = 0;
  double flops = 0;
  double ops = 0;
  // Relative gap between the published OPs and BOPs / 64 + FLOPs.
  double identity_gap() const;
};

std::vector<ReferenceRow> reference_rows();
std::optional<ReferenceRow> reference_for(const std::string& preset);

}  // namespace dybnn::cost
