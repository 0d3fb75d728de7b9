#include "dybnn/models.hpp"

#include <cmath>
#include <string>

#include "dybnn/error.hpp"
#include "dybnn/ops.hpp"
#include "dybnn/rng.hpp"

namespace dybnn::models {

using binarizers::ThresholdMode;

namespace {

// Appends a layer, resolving its input shape from its first producer.
class GraphBuilder {
 public:
  explicit GraphBuilder(LayerGraph& g) : g_(g) {}

  int add(LayerSpec s, std::vector<int> inputs) {
    std::vector<Shape> in;
    for (int src : inputs) in.push_back(shape_of(src));
    s.inputs = std::move(inputs);
    s.in_shape = in.at(0);
    s.out_shape = infer_shape(s, in);
    g_.layers.push_back(std::move(s));
    return static_cast<int>(g_.layers.size()) - 1;
  }

  const Shape& shape_of(int idx) const {
    return idx < 0 ? g_.input_shape : g_.layers.at(static_cast<std::size_t>(idx)).out_shape;
  }

 private:
  LayerGraph& g_;
};

LayerSpec spec(std::string name, LayerKind kind, bool full_precision = true) {
  LayerSpec s;
  s.name = std::move(name);
  s.kind = kind;
  s.full_precision = full_precision;
  return s;
}

LayerKind binarizer_layer(BinarizerKind k) {
  switch (k) {
    case BinarizerKind::sign: return LayerKind::sign;
    case BinarizerKind::rsign: return LayerKind::rsign;
    case BinarizerKind::dysign: return LayerKind::dysign;
  }
  return LayerKind::sign;
}

BinarizerKind binarizer_of(LayerKind k) {
  if (k == LayerKind::rsign) return BinarizerKind::rsign;
  if (k == LayerKind::dysign) return BinarizerKind::dysign;
  return BinarizerKind::sign;
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, std::uint64_t seed, const std::string& name) {
  Rng rng(hash_name(seed, name));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double sd, std::uint64_t seed, const std::string& name) {
  Rng rng(hash_name(seed, name));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, sd));
  return t;
}

template <typename T>
void add_uniform(ParamStore<T>& p, const std::string& name, Shape shape, std::size_t fan_in, std::uint64_t seed) {
  p.add(name, uniform_tensor<T>(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), seed, name));
}

template <typename T>
void add_hyper(ParamStore<T>& p, const std::string& prefix, std::size_t c, std::size_t gamma, std::uint64_t seed) {
  const std::size_t h = binarizers::squeeze_width(c, gamma);
  add_uniform(p, prefix + ".w1", Shape{h, c}, c, seed);
  add_uniform(p, prefix + ".w2", Shape{c, h}, c, seed);
}

template <typename T>
void add_site(ParamStore<T>& p, const std::string& prefix, BinarizerKind kind, std::size_t c, std::size_t gamma,
              std::uint64_t seed) {
  if (kind == BinarizerKind::rsign) p.add(prefix + ".threshold", Tensor<T>(Shape{c}, T(0)));
  if (kind == BinarizerKind::dysign) add_hyper(p, prefix + ".hyper", c, gamma, seed);
}

std::string site_prefix(const std::string& layer, const std::string& site) { return layer + ".site." + site; }

Shape batched(std::size_t b, const Shape& s) {
  Shape out{b};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

template <typename T>
void require_binary(const Var<T>& x, const std::string& layer, const ForwardOptions& opts) {
  if (opts.bin.exact() && !ops::is_pm_one(x.value())) {
    throw ContractViolation("layer '" + layer + "' received non-binary input");
  }
}

// Applies a sign / rsign / dysign site to x and records its thresholds.
template <typename T>
Var<T> apply_site(ParamStore<T>& params, const std::string& prefix, BinarizerKind kind, ThresholdMode mode,
                  bool gelu, const Var<T>& x, const ForwardOptions& opts, ForwardTrace<T>* trace) {
  switch (kind) {
    case BinarizerKind::sign:
      return binarizers::sign(x, opts.bin);
    case BinarizerKind::rsign: {
      const Var<T>& a = params.at(prefix + ".threshold");
      if (trace) trace->thresholds[prefix] = a.value().reshaped(Shape{1, a.value().size()});
      const std::size_t axis = (x.value().rank() == 3 && mode == ThresholdMode::channel) ? 2 : 1;
      return binarizers::rsign(x, a, axis, opts.bin);
    }
    case BinarizerKind::dysign: {
      binarizers::DySignParams<T> p;
      p.hyper = {params.at(prefix + ".hyper.w1"), params.at(prefix + ".hyper.w2"), gelu};
      p.mode = mode;
      Var<T> alpha;
      Var<T> out = binarizers::dysign(x, p, opts.bin, &alpha);
      if (trace) trace->thresholds[prefix] = alpha.value();
      return out;
    }
  }
  throw ArgumentError("unknown binarizer");
}

template <typename T>
Var<T> tokens_linear(const Var<T>& x, const Var<T>& w, const ForwardOptions& opts, bool binary_weights) {
  const Shape& s = x.shape();
  const Var<T> flat = ops::reshape(x, Shape{s[0] * s[1], s[2]});
  const Var<T> y = binarizers::binary_linear(flat, w, opts.bin, binary_weights);
  return ops::reshape(y, Shape{s[0], s[1], w.dim(0)});
}

// [B, N, D] -> [B*H, N, D/H]
template <typename T>
Var<T> split_heads(const Var<T>& x, std::size_t heads) {
  const Shape& s = x.shape();
  const std::size_t hd = s[2] / heads;
  const Var<T> r = ops::permute(ops::reshape(x, Shape{s[0], s[1], heads, hd}), {0, 2, 1, 3});
  return ops::reshape(r, Shape{s[0] * heads, s[1], hd});
}

// [B*H, N, hd] -> [B, N, H*hd]
template <typename T>
Var<T> merge_heads(const Var<T>& x, std::size_t batch, std::size_t heads) {
  const Shape& s = x.shape();
  const Var<T> r = ops::permute(ops::reshape(x, Shape{batch, heads, s[1], s[2]}), {0, 2, 1, 3});
  return ops::reshape(r, Shape{batch, s[1], heads * s[2]});
}

}  // namespace

DyBcnnConfig dybcnn_micro() {
  DyBcnnConfig c;
  c.units = {{32, 3, 1}, {64, 3, 2}, {128, 3, 2}};
  return c;
}

DyBcnnConfig reactnet_a() {
  DyBcnnConfig c;
  c.image = 224;
  c.stem_channels = 32;
  c.stem_stride = 2;
  c.num_classes = 1000;
  c.binarizer = BinarizerKind::rsign;
  const std::size_t widths[] = {32, 64, 128, 128, 256, 256, 512, 512, 512, 512, 512, 512, 1024, 1024};
  for (std::size_t i = 1; i < std::size(widths); ++i) {
    const std::size_t in = widths[i - 1], out = widths[i];
    const std::size_t stride = (in != out && out != 64) ? 2 : 1;
    c.units.push_back({in, 3, stride});
    c.units.push_back({out, 1, 1});
  }
  return c;
}

LayerGraph build_dybcnn(const DyBcnnConfig& cfg) {
  if (cfg.units.empty()) throw ConfigError("dybcnn: at least one unit is required");
  if (cfg.stem_stride == 0 || cfg.image % cfg.stem_stride != 0) {
    throw ConfigError("dybcnn: stem stride " + std::to_string(cfg.stem_stride) + " does not divide image size " +
                      std::to_string(cfg.image));
  }
  LayerGraph g;
  g.input_shape = {cfg.in_channels, cfg.image, cfg.image};
  g.num_classes = cfg.num_classes;
  GraphBuilder b(g);

  LayerSpec stem = spec("stem", LayerKind::conv_fp);
  stem.in_channels = cfg.in_channels;
  stem.out_channels = cfg.stem_channels;
  stem.kernel = cfg.stem_kernel;
  stem.stride = cfg.stem_stride;
  stem.padding = cfg.stem_kernel / 2;
  int prev = b.add(stem, {-1});

  for (std::size_t i = 0; i < cfg.units.size(); ++i) {
    const DyBcnnUnit& u = cfg.units[i];
    const std::string name = "block" + std::to_string(i);
    const Shape& xs = b.shape_of(prev);
    const std::size_t c = xs[0];
    if (u.out_channels != c && u.out_channels != 2 * c) {
      throw ConfigError(name + ": width " + std::to_string(c) + " -> " + std::to_string(u.out_channels) +
                        " must keep or double the channel count");
    }
    if (u.stride != 1 && u.stride != 2) throw ConfigError(name + ": stride must be 1 or 2");
    if (xs[1] % u.stride != 0 || xs[2] % u.stride != 0) {
      throw ConfigError(name + ": stride " + std::to_string(u.stride) + " on a " + std::to_string(xs[1]) + "x" +
                        std::to_string(xs[2]) + " map gives a non-integer output");
    }
    if (u.kernel % 2 == 0) throw ConfigError(name + ": kernel size must be odd");

    LayerSpec bin = spec(name + ".binarizer", binarizer_layer(cfg.binarizer), false);
    bin.in_channels = bin.out_channels = c;
    bin.gamma = cfg.gamma;
    const int bin_idx = b.add(bin, {prev});

    LayerSpec conv = spec(name + ".conv", LayerKind::conv_binary, false);
    conv.in_channels = c;
    conv.out_channels = u.out_channels;
    conv.kernel = u.kernel;
    conv.stride = u.stride;
    conv.padding = u.kernel / 2;
    conv.binary_weights = cfg.binary_weights;
    const int conv_idx = b.add(conv, {bin_idx});

    LayerSpec bn = spec(name + ".bn", LayerKind::batchnorm);
    bn.in_channels = bn.out_channels = u.out_channels;
    const int bn_idx = b.add(bn, {conv_idx});

    int shortcut = prev;
    if (u.stride == 2) {
      LayerSpec pool = spec(name + ".downsample", LayerKind::avgpool);
      pool.kernel = 2;
      pool.stride = 2;
      shortcut = b.add(pool, {shortcut});
    }
    if (u.out_channels == 2 * c) {
      LayerSpec dup = spec(name + ".duplicate", LayerKind::duplicate_concat);
      dup.in_channels = c;
      dup.out_channels = 2 * c;
      shortcut = b.add(dup, {shortcut});
    }
    const int add_idx = b.add(spec(name + ".add", LayerKind::residual_add), {bn_idx, shortcut});

    LayerSpec act = spec(name + ".activation",
                         cfg.activation == ActivationKind::rprelu ? LayerKind::rprelu : LayerKind::dyprelu);
    act.in_channels = act.out_channels = u.out_channels;
    act.gamma = cfg.gamma;
    prev = b.add(act, {add_idx});
  }

  LayerSpec pool = spec("pool", LayerKind::avgpool);
  pool.global = true;
  prev = b.add(pool, {prev});

  LayerSpec fc = spec("classifier", LayerKind::linear_fp);
  fc.in_channels = b.shape_of(prev)[0];
  fc.out_channels = cfg.num_classes;
  b.add(fc, {prev});
  g.validate();
  return g;
}

CctConfig dybinarycct_2() {
  CctConfig c;
  c.binarizer = BinarizerKind::dysign;
  return c;
}

CctConfig binarycct(std::size_t layers) {
  CctConfig c;
  c.layers = layers;
  c.embed = 256;
  c.heads = 4;
  c.binarizer = BinarizerKind::sign;
  return c;
}

LayerGraph build_dybinarycct(const CctConfig& cfg) {
  if (cfg.heads == 0 || cfg.embed % cfg.heads != 0) {
    throw ConfigError("cct: embedding dimension " + std::to_string(cfg.embed) + " is not divisible by " +
                      std::to_string(cfg.heads) + " heads");
  }
  if (cfg.mlp_ratio == 0) throw ConfigError("cct: mlp_ratio must be positive");
  LayerGraph g;
  g.input_shape = {cfg.in_channels, cfg.image, cfg.image};
  g.num_classes = cfg.num_classes;
  GraphBuilder b(g);

  LayerSpec conv = spec("tokenizer.conv", LayerKind::conv_fp);
  conv.in_channels = cfg.in_channels;
  conv.out_channels = cfg.embed;
  conv.kernel = cfg.tokenizer_kernel;
  conv.stride = cfg.tokenizer_stride;
  conv.padding = cfg.tokenizer_padding;
  int prev = b.add(conv, {-1});
  prev = b.add(spec("tokenizer.relu", LayerKind::relu), {prev});
  LayerSpec pool = spec("tokenizer.pool", LayerKind::maxpool);
  pool.kernel = cfg.pool_kernel;
  pool.stride = cfg.pool_stride;
  pool.padding = cfg.pool_padding;
  prev = b.add(pool, {prev});
  prev = b.add(spec("tokens", LayerKind::flatten_tokens), {prev});
  prev = b.add(spec("pos_embed", LayerKind::pos_embed), {prev});

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string name = "encoder" + std::to_string(l);
    LayerSpec n1 = spec(name + ".norm1", LayerKind::layernorm);
    const int n1_idx = b.add(n1, {prev});

    LayerSpec attn = spec(name + ".attn", LayerKind::mhsa_binary, false);
    attn.in_channels = attn.out_channels = cfg.embed;
    attn.heads = cfg.heads;
    attn.site_binarizer = cfg.binarizer;
    attn.mode = cfg.mode;
    attn.gamma = cfg.gamma;
    attn.hyper_gelu = cfg.hyper_gelu;
    attn.shift_shape = cfg.shift_shape;
    attn.binary_weights = cfg.binary_weights;
    const int attn_idx = b.add(attn, {n1_idx});
    const int add1 = b.add(spec(name + ".add1", LayerKind::residual_add), {attn_idx, prev});

    const int n2_idx = b.add(spec(name + ".norm2", LayerKind::layernorm), {add1});
    LayerSpec ffn = spec(name + ".ffn", LayerKind::ffn_binary, false);
    ffn.in_channels = ffn.out_channels = cfg.embed;
    ffn.hidden = cfg.mlp_ratio * cfg.embed;
    ffn.site_binarizer = cfg.binarizer;
    ffn.mode = cfg.mode;
    ffn.gamma = cfg.gamma;
    ffn.hyper_gelu = cfg.hyper_gelu;
    ffn.binary_weights = cfg.binary_weights;
    const int ffn_idx = b.add(ffn, {n2_idx});
    prev = b.add(spec(name + ".add2", LayerKind::residual_add), {ffn_idx, add1});
  }
  if (cfg.layers > 0) prev = b.add(spec("norm", LayerKind::layernorm), {prev});

  LayerSpec sp = spec("seqpool", LayerKind::seqpool);
  sp.in_channels = cfg.embed;
  prev = b.add(sp, {prev});
  LayerSpec fc = spec("classifier", LayerKind::linear_fp);
  fc.in_channels = cfg.embed;
  fc.out_channels = cfg.num_classes;
  b.add(fc, {prev});
  g.validate();
  return g;
}

bool is_hyper_param(const std::string& name) {
  return name.find("hyper.w1") != std::string::npos || name.find("hyper.w2") != std::string::npos;
}

template <typename T>
Var<T>& ParamStore<T>::add(const std::string& name, Tensor<T> value) {
  if (params_.count(name)) throw ArgumentError("duplicate parameter '" + name + "'");
  names_.push_back(name);
  return params_.emplace(name, Var<T>::leaf(std::move(value), true)).first->second;
}

template <typename T>
Tensor<T>& ParamStore<T>::add_buffer(const std::string& name, Tensor<T> value) {
  if (buffers_.count(name)) throw ArgumentError("duplicate buffer '" + name + "'");
  buffer_names_.push_back(name);
  return buffers_.emplace(name, std::move(value)).first->second;
}

template <typename T>
Var<T>& ParamStore<T>::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ArgumentError("no parameter named '" + name + "'");
  return it->second;
}

template <typename T>
const Var<T>& ParamStore<T>::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ArgumentError("no parameter named '" + name + "'");
  return it->second;
}

template <typename T>
Tensor<T>& ParamStore<T>::buffer(const std::string& name) {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) throw ArgumentError("no buffer named '" + name + "'");
  return it->second;
}

template <typename T>
const Tensor<T>& ParamStore<T>::buffer(const std::string& name) const {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) throw ArgumentError("no buffer named '" + name + "'");
  return it->second;
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : params_) n += v.value().size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& [name, v] : params_) v.zero_grad();
}

template <typename T>
void init_layer_params(ParamStore<T>& p, const LayerSpec& s, std::uint64_t seed) {
  const std::string& n = s.name;
  switch (s.kind) {
    case LayerKind::conv_fp:
    case LayerKind::conv_binary:
      add_uniform(p, n + ".weight", Shape{s.out_channels, s.in_channels, s.kernel, s.kernel},
                  s.in_channels * s.kernel * s.kernel, seed);
      break;
    case LayerKind::linear_fp:
      add_uniform(p, n + ".weight", Shape{s.out_channels, s.in_channels}, s.in_channels, seed);
      p.add(n + ".bias", Tensor<T>(Shape{s.out_channels}, T(0)));
      break;
    case LayerKind::linear_binary:
      add_uniform(p, n + ".weight", Shape{s.out_channels, s.in_channels}, s.in_channels, seed);
      break;
    case LayerKind::rsign:
      p.add(n + ".threshold", Tensor<T>(Shape{s.in_channels}, T(0)));
      break;
    case LayerKind::dysign:
      add_hyper(p, n + ".hyper", s.in_channels, s.gamma, seed);
      break;
    case LayerKind::rprelu:
    case LayerKind::dyprelu: {
      const std::size_t c = s.in_channels;
      p.add(n + ".beta", Tensor<T>(Shape{c}, T(0.25)));
      if (s.kind == LayerKind::rprelu) {
        p.add(n + ".gamma", Tensor<T>(Shape{c}, T(0)));
        p.add(n + ".zeta", Tensor<T>(Shape{c}, T(0)));
      } else {
        add_hyper(p, n + ".gamma_hyper", c, s.gamma, seed);
        add_hyper(p, n + ".zeta_hyper", c, s.gamma, seed);
      }
      break;
    }
    case LayerKind::batchnorm:
      p.add(n + ".gamma", Tensor<T>(Shape{s.in_channels}, T(1)));
      p.add(n + ".beta", Tensor<T>(Shape{s.in_channels}, T(0)));
      p.add_buffer(n + ".running_mean", Tensor<T>(Shape{s.in_channels}, T(0)));
      p.add_buffer(n + ".running_var", Tensor<T>(Shape{s.in_channels}, T(1)));
      break;
    case LayerKind::layernorm: {
      const std::size_t d = s.in_shape.back();
      p.add(n + ".gamma", Tensor<T>(Shape{d}, T(1)));
      p.add(n + ".beta", Tensor<T>(Shape{d}, T(0)));
      break;
    }
    case LayerKind::pos_embed:
      p.add(n + ".weight", normal_tensor<T>(batched(1, s.in_shape), 0.2, seed, n + ".weight"));
      break;
    case LayerKind::mhsa_binary: {
      const std::size_t tokens = s.in_shape[0], d = s.in_shape[1];
      for (const char* w : {"q", "k", "v", "proj"}) {
        add_uniform(p, n + "." + w + ".weight", Shape{d, d}, d, seed);
      }
      const Shape shift = s.shift_shape == ShiftShape::full ? Shape{1, s.heads, tokens, tokens}
                                                            : Shape{1, s.heads, tokens, 1};
      p.add(n + ".shift", Tensor<T>(shift, static_cast<T>(1.0 / static_cast<double>(tokens))));
      for (const auto& site : mhsa_sites()) {
        add_site(p, site_prefix(n, site), s.site_binarizer, site_channels(s.in_shape, s.mode), s.gamma, seed);
      }
      break;
    }
    case LayerKind::ffn_binary: {
      const std::size_t d = s.in_shape[1];
      add_uniform(p, n + ".fc1.weight", Shape{s.hidden, d}, d, seed);
      add_uniform(p, n + ".fc2.weight", Shape{d, s.hidden}, s.hidden, seed);
      add_site(p, site_prefix(n, "in"), s.site_binarizer, site_channels(s.in_shape, s.mode), s.gamma, seed);
      add_site(p, site_prefix(n, "mid"), s.site_binarizer, site_channels(Shape{s.in_shape[0], s.hidden}, s.mode),
               s.gamma, seed);
      break;
    }
    case LayerKind::seqpool:
      add_uniform(p, n + ".weight", Shape{1, s.in_channels}, s.in_channels, seed);
      p.add(n + ".bias", Tensor<T>(Shape{1}, T(0)));
      break;
    default:
      break;
  }
}

template <typename T>
Var<T> seqpool(const Var<T>& tokens, const Var<T>& weight, const Var<T>& bias) {
  const Shape& s = tokens.shape();
  if (s.size() != 3) throw DimensionError("seqpool expects [B, N, D] tokens, got " + shape_str(s));
  const Var<T> flat = ops::reshape(tokens, Shape{s[0] * s[1], s[2]});
  const Var<T> scores = ops::add_bcast(ops::linear(flat, weight), ops::reshape(bias, Shape{1, 1}));
  const Var<T> w = ops::softmax_last(ops::reshape(scores, Shape{s[0], 1, s[1]}));
  return ops::reshape(ops::bmm_nn(w, tokens), Shape{s[0], s[2]});
}

template <typename T>
Var<T> binary_mhsa_forward(const Var<T>& tokens, BlockContext<T> c) {
  const LayerSpec& s = c.spec;
  const std::string& n = s.name;
  const Shape& ts = tokens.shape();
  if (ts.size() != 3 || s.heads == 0 || ts[2] % s.heads != 0) {
    throw DimensionError("layer '" + n + "' expects [B, N, D] tokens with D divisible by heads, got " + shape_str(ts));
  }
  const std::size_t batch = ts[0], heads = s.heads, hd = ts[2] / heads;
  const bool exact = c.opts.bin.exact();
  auto bin = [&](const std::string& site, const Var<T>& x) {
    return apply_site(c.params, site_prefix(n, site), s.site_binarizer, s.mode, s.hyper_gelu, x, c.opts, c.trace);
  };

  const Var<T> xb = bin("in", tokens);
  const Var<T>& wv = c.params.at(n + ".v.weight");
  const Var<T> qb = split_heads(bin("q", tokens_linear(xb, c.params.at(n + ".q.weight"), c.opts, s.binary_weights)), heads);
  const Var<T> kb = split_heads(bin("k", tokens_linear(xb, c.params.at(n + ".k.weight"), c.opts, s.binary_weights)), heads);
  const Var<T> vb = split_heads(bin("v", tokens_linear(xb, wv, c.opts, s.binary_weights)), heads);

  const Var<T> scores = ops::scale(ops::bmm_nt(qb, kb, exact), 1.0 / std::sqrt(static_cast<double>(hd)));
  const std::size_t nt = ts[1];
  const Var<T> probs = ops::reshape(ops::softmax_last(scores), Shape{batch, heads, nt, nt});
  const Var<T> pb = binarizers::shifted_attention_sign(probs, c.params.at(n + ".shift"), c.opts.bin);
  Var<T> ctx = ops::bmm_nn(ops::reshape(pb, Shape{batch * heads, nt, nt}), vb, exact);
  if (s.binary_weights) ctx = ops::mul_bcast(ctx, ops::reshape(ops::mean_abs(wv), Shape{1, 1, 1}));
  if (c.trace) {
    c.trace->attention[n] = pb.value();
    c.trace->contexts[n] = ctx.value();
  }
  const Var<T> cb = bin("ctx", merge_heads(ctx, batch, heads));
  return tokens_linear(cb, c.params.at(n + ".proj.weight"), c.opts, s.binary_weights);
}

template <typename T>
Var<T> binary_ffn_forward(const Var<T>& tokens, BlockContext<T> c) {
  const LayerSpec& s = c.spec;
  const std::string& n = s.name;
  if (tokens.shape().size() != 3) {
    throw DimensionError("layer '" + n + "' expects [B, N, D] tokens, got " + shape_str(tokens.shape()));
  }
  auto bin = [&](const std::string& site, const Var<T>& x) {
    return apply_site(c.params, site_prefix(n, site), s.site_binarizer, s.mode, s.hyper_gelu, x, c.opts, c.trace);
  };
  const Var<T> xb = bin("in", tokens);
  const Var<T> h = ops::gelu(tokens_linear(xb, c.params.at(n + ".fc1.weight"), c.opts, s.binary_weights));
  const Var<T> hb = bin("mid", h);
  return tokens_linear(hb, c.params.at(n + ".fc2.weight"), c.opts, s.binary_weights);
}

template <typename T>
Model<T>::Model(LayerGraph graph, std::uint64_t seed) : graph_(std::move(graph)) {
  graph_.validate();
  for (const auto& s : graph_.layers) init_layer_params(params_, s, seed);
}

template <typename T>
void Model<T>::zero_hyperfunctions() {
  for (const auto& name : params_.names()) {
    if (is_hyper_param(name)) params_.at(name).mutable_value().fill(T(0));
  }
}

template <typename T>
void Model<T>::set_attention_shift(T value) {
  for (const auto& s : graph_.layers) {
    if (s.kind == LayerKind::mhsa_binary) params_.at(s.name + ".shift").mutable_value().fill(value);
  }
}

template <typename T>
Var<T> Model<T>::forward(const Tensor<T>& input, const ForwardOptions& opts, ForwardTrace<T>* trace) {
  const Shape& is = input.shape();
  if (is.size() != graph_.input_shape.size() + 1 || Shape(is.begin() + 1, is.end()) != graph_.input_shape) {
    throw DimensionError("model expects input [B, " + shape_str(graph_.input_shape) + "], got " + shape_str(is));
  }
  if (trace) *trace = ForwardTrace<T>{};
  const Var<T> x = Var<T>::leaf(input, false);
  std::vector<Var<T>> values;
  values.reserve(graph_.layers.size());
  for (const auto& s : graph_.layers) {
    std::vector<Var<T>> in;
    for (int src : s.inputs) in.push_back(src < 0 ? x : values[static_cast<std::size_t>(src)]);
    Var<T> out = run_layer(s, in, opts, trace);
    if (opts.check_finite && !out.value().all_finite()) throw NumericFault(s.name, "non-finite activations");
    if (trace) trace->shapes.emplace_back(out.shape().begin() + 1, out.shape().end());
    values.push_back(std::move(out));
  }
  return values.back();
}

template <typename T>
Var<T> Model<T>::site(const std::string& prefix, BinarizerKind kind, const LayerSpec& s, const Var<T>& x,
                      const ForwardOptions& opts, ForwardTrace<T>* trace) {
  return apply_site(params_, prefix, kind, s.mode, s.hyper_gelu, x, opts, trace);
}

template <typename T>
Var<T> Model<T>::run_layer(const LayerSpec& s, const std::vector<Var<T>>& in, const ForwardOptions& opts,
                           ForwardTrace<T>* trace) {
  const Var<T>& x = in.at(0);
  const std::string& n = s.name;
  switch (s.kind) {
    case LayerKind::conv_fp:
      return ops::conv2d(x, params_.at(n + ".weight"), s.stride, s.padding);
    case LayerKind::conv_binary: {
      require_binary(x, n, opts);
      const Var<T>& w = params_.at(n + ".weight");
      if (!s.binary_weights) return ops::conv2d(x, w, s.stride, s.padding, -1.0, false);
      return ops::conv2d(x, binarizers::sign(w, opts.bin), s.stride, s.padding, -1.0, opts.bin.exact());
    }
    case LayerKind::linear_fp: {
      const Var<T>& w = params_.at(n + ".weight");
      const Shape xs = x.shape();
      const Var<T> flat = xs.size() == 2 ? x : ops::reshape(x, Shape{x.value().size() / xs.back(), xs.back()});
      Var<T> y = ops::add_bcast(ops::linear(flat, w), ops::reshape(params_.at(n + ".bias"), Shape{1, w.dim(0)}));
      if (xs.size() == 2) return y;
      Shape os = xs;
      os.back() = w.dim(0);
      return ops::reshape(y, os);
    }
    case LayerKind::linear_binary: {
      require_binary(x, n, opts);
      const Var<T>& w = params_.at(n + ".weight");
      if (x.shape().size() == 3) return tokens_linear(x, w, opts, s.binary_weights);
      return binarizers::binary_linear(x, w, opts.bin, s.binary_weights);
    }
    case LayerKind::sign:
    case LayerKind::rsign:
    case LayerKind::dysign:
      return site(n, binarizer_of(s.kind), s, x, opts, trace);
    case LayerKind::rprelu:
    case LayerKind::dyprelu: {
      binarizers::PReLUParams<T> p;
      p.beta = params_.at(n + ".beta");
      if (s.kind == LayerKind::rprelu) {
        p.gamma_shift = params_.at(n + ".gamma");
        p.zeta_shift = params_.at(n + ".zeta");
        return binarizers::rprelu(x, p);
      }
      p.dynamic = true;
      p.gamma_hyper = {params_.at(n + ".gamma_hyper.w1"), params_.at(n + ".gamma_hyper.w2"), false};
      p.zeta_hyper = {params_.at(n + ".zeta_hyper.w1"), params_.at(n + ".zeta_hyper.w2"), false};
      return binarizers::dyprelu(x, p);
    }
    case LayerKind::batchnorm:
      return ops::batchnorm2d(x, params_.at(n + ".gamma"), params_.at(n + ".beta"),
                              params_.buffer(n + ".running_mean"), params_.buffer(n + ".running_var"), opts.training);
    case LayerKind::layernorm:
      return ops::layernorm_last(x, params_.at(n + ".gamma"), params_.at(n + ".beta"));
    case LayerKind::gelu:
      return ops::gelu(x);
    case LayerKind::relu:
      return ops::relu(x);
    case LayerKind::maxpool:
      return ops::maxpool2d(x, s.kernel, s.stride, s.padding);
    case LayerKind::avgpool:
      if (s.global) return ops::reshape(ops::mean_keep(x, {2, 3}), Shape{x.dim(0), x.dim(1)});
      return ops::avgpool2d(x, s.kernel, s.stride);
    case LayerKind::mhsa_binary:
      return binary_mhsa_forward(x, BlockContext<T>{params_, s, opts, trace});
    case LayerKind::ffn_binary:
      return binary_ffn_forward(x, BlockContext<T>{params_, s, opts, trace});
    case LayerKind::seqpool:
      return seqpool(x, params_.at(n + ".weight"), params_.at(n + ".bias"));
    case LayerKind::residual_add:
      return ops::add(x, in.at(1));
    case LayerKind::duplicate_concat:
      return ops::concat(x, x, 1);
    case LayerKind::flatten_tokens: {
      const Shape& xs = x.shape();
      const Var<T> r = ops::reshape(x, Shape{xs[0], xs[1], xs[2] * xs[3]});
      return ops::permute(r, {0, 2, 1});
    }
    case LayerKind::pos_embed:
      return ops::add_bcast(x, params_.at(n + ".weight"));
  }
  throw ArgumentError("layer '" + n + "' has an unknown kind");
}

#define DYBNN_INSTANTIATE(T)                                                                  \
  template class ParamStore<T>;                                                               \
  template class Model<T>;                                                                    \
  template Var<T> binary_mhsa_forward<T>(const Var<T>&, BlockContext<T>);                     \
  template Var<T> binary_ffn_forward<T>(const Var<T>&, BlockContext<T>);                      \
  template Var<T> seqpool<T>(const Var<T>&, const Var<T>&, const Var<T>&);                    \
  template void init_layer_params<T>(ParamStore<T>&, const LayerSpec&, std::uint64_t);

DYBNN_INSTANTIATE(float)
DYBNN_INSTANTIATE(double)
#undef DYBNN_INSTANTIATE

}  // namespace dybnn::models
