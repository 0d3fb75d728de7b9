#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "dybnn/binarizers.hpp"
#include "dybnn/tensor.hpp"

namespace dybnn::models {

enum class LayerKind {
  conv_fp,
  conv_binary,
  linear_fp,
  linear_binary,
  sign,
  rsign,
  dysign,
  rprelu,
  dyprelu,
  batchnorm,
  layernorm,
  gelu,
  relu,
  maxpool,
  avgpool,
  mhsa_binary,
  ffn_binary,
  seqpool,
  residual_add,
  duplicate_concat,
  flatten_tokens,
  pos_embed,
};

enum class BinarizerKind { sign, rsign, dysign };
enum class ActivationKind { rprelu, dyprelu };
// Attention shift layout: one scalar per head and query (broadcast over keys)
// or a full N x N matrix per head.
enum class ShiftShape { per_query, full };

std::string_view to_string(LayerKind k);
std::string_view to_string(BinarizerKind k);
std::string_view to_string(ActivationKind k);
std::string_view to_string(binarizers::ThresholdMode m);
std::string_view to_string(ShiftShape s);
LayerKind layer_kind_from(std::string_view s);
BinarizerKind binarizer_from(std::string_view s);
ActivationKind activation_from(std::string_view s);
binarizers::ThresholdMode threshold_mode_from(std::string_view s);
ShiftShape shift_shape_from(std::string_view s);

bool is_binarizer(LayerKind k);

// One layer of a model. Shapes exclude the batch dimension.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::relu;
  std::vector<int> inputs;  // producing layer indices; -1 is the graph input
  Shape in_shape;
  Shape out_shape;
  bool full_precision = true;

  // convolution / pooling / linear
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool global = false;

  // binarizer sites
  binarizers::ThresholdMode mode = binarizers::ThresholdMode::channel;
  std::size_t gamma = 16;
  bool hyper_gelu = false;

  // transformer blocks
  std::size_t heads = 0;
  std::size_t hidden = 0;
  BinarizerKind site_binarizer = BinarizerKind::sign;
  ShiftShape shift_shape = ShiftShape::per_query;

  bool binary_weights = true;
};

struct LayerGraph {
  std::vector<LayerSpec> layers;
  Shape input_shape;
  std::size_t num_classes = 0;

  // Re-derives every output shape from its inputs and checks the declared
  // ones; also checks the precision flags of the first and last layer.
  void validate() const;

  std::vector<LayerKind> kinds() const;
  int index_of(std::string_view name) const;
};

// Output shape of `spec` given the shapes of its inputs (per sample).
Shape infer_shape(const LayerSpec& spec, const std::vector<Shape>& inputs);

// Binarizer sites inside a transformer block, in execution order.
std::vector<std::string> mhsa_sites();
std::vector<std::string> ffn_sites();

// Channel count a binarizer site's thresholds cover: N (token) or the
// feature width (channel) for token inputs, C for NCHW.
std::size_t site_channels(const Shape& site_input, binarizers::ThresholdMode mode);

}  // namespace dybnn::models
