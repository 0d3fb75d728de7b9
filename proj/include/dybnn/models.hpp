#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dybnn/autograd.hpp"
#include "dybnn/binarizers.hpp"
#include "dybnn/layer_graph.hpp"

namespace dybnn::models {

// One binary unit of the convolutional stack: binarizer, binary conv,
// batchnorm, residual add and activation.
struct DyBcnnUnit {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
};

struct DyBcnnConfig {
  std::size_t in_channels = 3;
  std::size_t image = 32;
  std::size_t stem_channels = 32;
  std::size_t stem_kernel = 3;
  std::size_t stem_stride = 1;
  std::vector<DyBcnnUnit> units;
  BinarizerKind binarizer = BinarizerKind::sign;
  ActivationKind activation = ActivationKind::rprelu;
  std::size_t gamma = 16;
  std::size_t num_classes = 10;
  bool binary_weights = true;
};

// Three units of widths 32, 64, 128 on 32x32 images.
DyBcnnConfig dybcnn_micro();
// MobileNetV1-shaped ReActNet-A layout on 224x224 images with 1000 classes.
DyBcnnConfig reactnet_a();

LayerGraph build_dybcnn(const DyBcnnConfig& cfg);

struct CctConfig {
  std::size_t in_channels = 3;
  std::size_t image = 32;
  std::size_t layers = 2;
  std::size_t embed = 128;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 2;
  std::size_t tokenizer_kernel = 3;
  std::size_t tokenizer_stride = 1;
  std::size_t tokenizer_padding = 1;
  std::size_t pool_kernel = 3;
  std::size_t pool_stride = 2;
  std::size_t pool_padding = 1;
  BinarizerKind binarizer = BinarizerKind::sign;
  binarizers::ThresholdMode mode = binarizers::ThresholdMode::token;
  std::size_t gamma = 4;
  bool hyper_gelu = true;
  ShiftShape shift_shape = ShiftShape::per_query;
  std::size_t num_classes = 10;
  bool binary_weights = true;
};

CctConfig dybinarycct_2();
CctConfig binarycct(std::size_t layers);  // CCT-6 / CCT-7 shapes, sign sites

LayerGraph build_dybinarycct(const CctConfig& cfg);

// Named parameters (trainable) and buffers (running statistics), kept in
// insertion order.
template <typename T>
class ParamStore {
 public:
  Var<T>& add(const std::string& name, Tensor<T> value);
  Tensor<T>& add_buffer(const std::string& name, Tensor<T> value);

  Var<T>& at(const std::string& name);
  const Var<T>& at(const std::string& name) const;
  Tensor<T>& buffer(const std::string& name);
  const Tensor<T>& buffer(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const std::vector<std::string>& names() const { return names_; }
  const std::vector<std::string>& buffer_names() const { return buffer_names_; }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::string> names_;
  std::map<std::string, Var<T>> params_;
  std::vector<std::string> buffer_names_;
  std::map<std::string, Tensor<T>> buffers_;
};

// True for the weights of a threshold-generating hyperfunction.
bool is_hyper_param(const std::string& name);

struct ForwardOptions {
  bool training = false;
  binarizers::BinarizeOptions bin;
  bool check_finite = true;
};

// Observations from one forward pass: per-layer output shapes (batch
// dimension dropped) and the thresholds each binarizer site applied.
template <typename T>
struct ForwardTrace {
  std::vector<Shape> shapes;
  std::map<std::string, Tensor<T>> thresholds;
  // Binarized attention [B, H, N, N] and per-head contexts [B*H, N, D/H] of
  // every attention layer, keyed by layer name.
  std::map<std::string, Tensor<T>> attention;
  std::map<std::string, Tensor<T>> contexts;
};

template <typename T>
class Model {
 public:
  Model(LayerGraph graph, std::uint64_t seed);

  const LayerGraph& graph() const { return graph_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // Logits [B, classes] for an input batch [B, ...input_shape].
  Var<T> forward(const Tensor<T>& input, const ForwardOptions& opts = {}, ForwardTrace<T>* trace = nullptr);

  void zero_hyperfunctions();
  // Sets every attention shift entry to `value`.
  void set_attention_shift(T value);

 private:
  Var<T> run_layer(const LayerSpec& s, const std::vector<Var<T>>& in, const ForwardOptions& opts,
                   ForwardTrace<T>* trace);
  Var<T> site(const std::string& prefix, BinarizerKind kind, const LayerSpec& s, const Var<T>& x,
              const ForwardOptions& opts, ForwardTrace<T>* trace);

  LayerGraph graph_;
  ParamStore<T> params_;
};

// Binarized attention and feed-forward blocks on tokens [B, N, D]; exposed
// for direct testing. `prefix` names the block's parameters in `params`.
template <typename T>
struct BlockContext {
  ParamStore<T>& params;
  const LayerSpec& spec;
  const ForwardOptions& opts;
  ForwardTrace<T>* trace = nullptr;
};

template <typename T>
Var<T> binary_mhsa_forward(const Var<T>& tokens, BlockContext<T> ctx);

template <typename T>
Var<T> binary_ffn_forward(const Var<T>& tokens, BlockContext<T> ctx);

// Softmax-weighted pooling of tokens [B, N, D] with a D -> 1 scoring map.
template <typename T>
Var<T> seqpool(const Var<T>& tokens, const Var<T>& weight, const Var<T>& bias);

// Adds the parameters `spec` needs to `params`, each drawn from its own
// stream seeded by (seed, name).
template <typename T>
void init_layer_params(ParamStore<T>& params, const LayerSpec& spec, std::uint64_t seed);

}  // namespace dybnn::models
