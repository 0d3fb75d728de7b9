#include "dybnn/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dybnn/error.hpp"

namespace dybnn::config {

using json = nlohmann::json;
using models::BinarizerKind;

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

// Walks one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown fields.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError((path_.empty() ? "config" : path_) + ": expected an object");
  }

  template <typename F>
  void opt(const std::string& key, F&& apply) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    const std::string p = join(path_, key);
    try {
      apply(*it, p);
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      if (msg.rfind(p, 0) == 0) throw;
      throw ConfigError(p + ": " + msg);
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(join(path_, it.key()) + ": unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::size_t as_size(const json& v, const std::string& p, bool positive = true) {
  if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(p + ": expected a non-negative integer");
  const auto n = v.get<std::size_t>();
  if (positive && n == 0) throw ConfigError(p + ": must be positive");
  return n;
}

std::uint64_t as_u64(const json& v, const std::string& p) {
  if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(p + ": expected a non-negative integer");
  return v.get<std::uint64_t>();
}

double as_double(const json& v, const std::string& p) {
  if (!v.is_number()) throw ConfigError(p + ": expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ConfigError(p + ": must be finite");
  return d;
}

bool as_bool(const json& v, const std::string& p) {
  if (!v.is_boolean()) throw ConfigError(p + ": expected true or false");
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& p) {
  if (!v.is_string()) throw ConfigError(p + ": expected a string");
  return v.get<std::string>();
}

RunConfig cnn_preset(models::DyBcnnConfig cnn, const std::string& name, std::size_t epochs) {
  RunConfig c;
  c.model.preset = name;
  c.model.family = Family::cnn;
  c.model.cnn = std::move(cnn);
  c.optim.adam.lr = 5e-4;
  c.optim.schedule = "linear";
  c.optim.batch_size = 256;
  c.optim.epochs = epochs;
  return c;
}

RunConfig cct_preset(models::CctConfig cct, const std::string& name, std::size_t epochs) {
  RunConfig c;
  c.model.preset = name;
  c.model.family = Family::cct;
  c.model.cct = std::move(cct);
  c.optim.adam.lr = 1e-3;
  c.optim.adam.weight_decay = 1e-4;
  c.optim.schedule = "cosine";
  c.optim.batch_size = 128;
  c.optim.epochs = epochs;
  return c;
}

void apply_model(const json& j, ModelConfig& m) {
  Fields f(j, "model");
  const bool cnn = m.family == Family::cnn;
  auto only = [&](bool ok, const std::string& p) {
    if (!ok) throw ConfigError(p + ": not applicable to " + std::string(cnn ? "convolutional" : "transformer") + " presets");
  };
  f.opt("preset", [&](const json& v, const std::string& p) {
    if (as_string(v, p) != m.preset) throw ConfigError(p + ": conflicts with the selected preset '" + m.preset + "'");
  });
  f.opt("family", [&](const json& v, const std::string& p) {
    if (as_string(v, p) != (cnn ? "cnn" : "cct")) throw ConfigError(p + ": does not match preset '" + m.preset + "'");
  });
  f.opt("binarizer", [&](const json& v, const std::string& p) {
    const BinarizerKind k = models::binarizer_from(as_string(v, p));
    (cnn ? m.cnn.binarizer : m.cct.binarizer) = k;
  });
  f.opt("gamma", [&](const json& v, const std::string& p) { (cnn ? m.cnn.gamma : m.cct.gamma) = as_size(v, p); });
  f.opt("image", [&](const json& v, const std::string& p) { (cnn ? m.cnn.image : m.cct.image) = as_size(v, p); });
  f.opt("in_channels",
        [&](const json& v, const std::string& p) { (cnn ? m.cnn.in_channels : m.cct.in_channels) = as_size(v, p); });
  f.opt("num_classes",
        [&](const json& v, const std::string& p) { (cnn ? m.cnn.num_classes : m.cct.num_classes) = as_size(v, p); });
  f.opt("binary_weights", [&](const json& v, const std::string& p) {
    (cnn ? m.cnn.binary_weights : m.cct.binary_weights) = as_bool(v, p);
  });
  // convolutional fields
  f.opt("activation", [&](const json& v, const std::string& p) {
    only(cnn, p);
    m.cnn.activation = models::activation_from(as_string(v, p));
  });
  f.opt("stem_channels", [&](const json& v, const std::string& p) { only(cnn, p); m.cnn.stem_channels = as_size(v, p); });
  f.opt("stem_kernel", [&](const json& v, const std::string& p) { only(cnn, p); m.cnn.stem_kernel = as_size(v, p); });
  f.opt("stem_stride", [&](const json& v, const std::string& p) { only(cnn, p); m.cnn.stem_stride = as_size(v, p); });
  f.opt("units", [&](const json& v, const std::string& p) {
    only(cnn, p);
    if (!v.is_array() || v.empty()) throw ConfigError(p + ": expected a non-empty array");
    m.cnn.units.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::string up = p + "[" + std::to_string(i) + "]";
      models::DyBcnnUnit u;
      Fields uf(v[i], up);
      uf.opt("out_channels", [&](const json& x, const std::string& q) { u.out_channels = as_size(x, q); });
      uf.opt("kernel", [&](const json& x, const std::string& q) { u.kernel = as_size(x, q); });
      uf.opt("stride", [&](const json& x, const std::string& q) { u.stride = as_size(x, q); });
      uf.finish();
      if (u.out_channels == 0) throw ConfigError(up + ".out_channels: required");
      m.cnn.units.push_back(u);
    }
  });
  // transformer fields
  f.opt("mode", [&](const json& v, const std::string& p) {
    only(!cnn, p);
    m.cct.mode = models::threshold_mode_from(as_string(v, p));
  });
  f.opt("layers", [&](const json& v, const std::string& p) { only(!cnn, p); m.cct.layers = as_size(v, p, false); });
  f.opt("embed", [&](const json& v, const std::string& p) { only(!cnn, p); m.cct.embed = as_size(v, p); });
  f.opt("heads", [&](const json& v, const std::string& p) { only(!cnn, p); m.cct.heads = as_size(v, p); });
  f.opt("mlp_ratio", [&](const json& v, const std::string& p) { only(!cnn, p); m.cct.mlp_ratio = as_size(v, p); });
  f.opt("hyper_gelu", [&](const json& v, const std::string& p) { only(!cnn, p); m.cct.hyper_gelu = as_bool(v, p); });
  f.opt("shift_shape", [&](const json& v, const std::string& p) {
    only(!cnn, p);
    m.cct.shift_shape = models::shift_shape_from(as_string(v, p));
  });
  f.opt("tokenizer_kernel", [&](const json& v, const std::string& p) { only(!cnn, p); m.cct.tokenizer_kernel = as_size(v, p); });
  f.opt("tokenizer_stride", [&](const json& v, const std::string& p) { only(!cnn, p); m.cct.tokenizer_stride = as_size(v, p); });
  f.opt("tokenizer_padding",
        [&](const json& v, const std::string& p) { only(!cnn, p); m.cct.tokenizer_padding = as_size(v, p, false); });
  f.opt("pool_kernel", [&](const json& v, const std::string& p) { only(!cnn, p); m.cct.pool_kernel = as_size(v, p); });
  f.opt("pool_stride", [&](const json& v, const std::string& p) { only(!cnn, p); m.cct.pool_stride = as_size(v, p); });
  f.opt("pool_padding", [&](const json& v, const std::string& p) { only(!cnn, p); m.cct.pool_padding = as_size(v, p, false); });
  f.finish();
}

void apply_optim(const json& j, OptimConfig& o) {
  Fields f(j, "optim");
  f.opt("lr", [&](const json& v, const std::string& p) {
    o.adam.lr = as_double(v, p);
    if (!(o.adam.lr > 0)) throw ConfigError(p + ": must be positive");
  });
  f.opt("beta1", [&](const json& v, const std::string& p) { o.adam.beta1 = as_double(v, p); });
  f.opt("beta2", [&](const json& v, const std::string& p) { o.adam.beta2 = as_double(v, p); });
  f.opt("eps", [&](const json& v, const std::string& p) { o.adam.eps = as_double(v, p); });
  f.opt("weight_decay", [&](const json& v, const std::string& p) { o.adam.weight_decay = as_double(v, p); });
  f.opt("schedule", [&](const json& v, const std::string& p) {
    o.schedule = as_string(v, p);
    if (o.schedule != "linear" && o.schedule != "cosine" && o.schedule != "constant") {
      throw ConfigError(p + ": expected linear, cosine or constant");
    }
  });
  f.opt("epochs", [&](const json& v, const std::string& p) { o.epochs = as_size(v, p, false); });
  f.opt("batch_size", [&](const json& v, const std::string& p) { o.batch_size = as_size(v, p); });
  f.opt("distillation", [&](const json& v, const std::string& p) { o.distillation = as_bool(v, p); });
  f.finish();
  for (double b : {o.adam.beta1, o.adam.beta2}) {
    if (!(b >= 0 && b < 1)) throw ConfigError("optim: betas must lie in [0, 1)");
  }
}

void apply_data(const json& j, DataConfig& d) {
  Fields f(j, "data");
  f.opt("dataset", [&](const json& v, const std::string& p) {
    d.dataset = as_string(v, p);
    if (d.dataset != "synthetic" && d.dataset != "cifar10") throw ConfigError(p + ": expected synthetic or cifar10");
  });
  f.opt("cifar_dir", [&](const json& v, const std::string& p) { d.cifar_dir = as_string(v, p); });
  f.opt("augment", [&](const json& v, const std::string& p) { d.augment = as_bool(v, p); });
  f.opt("shuffle", [&](const json& v, const std::string& p) { d.shuffle = as_bool(v, p); });
  f.opt("limit_train", [&](const json& v, const std::string& p) { d.limit_train = as_size(v, p, false); });
  f.opt("limit_test", [&](const json& v, const std::string& p) { d.limit_test = as_size(v, p, false); });
  f.opt("synth", [&](const json& v, const std::string& p) {
    Fields s(v, p);
    s.opt("train_samples", [&](const json& x, const std::string& q) { d.synth.train_samples = as_size(x, q); });
    s.opt("test_samples", [&](const json& x, const std::string& q) { d.synth.test_samples = as_size(x, q); });
    s.opt("separation", [&](const json& x, const std::string& q) { d.synth.separation = as_double(x, q); });
    s.opt("noise", [&](const json& x, const std::string& q) { d.synth.noise = as_double(x, q); });
    s.opt("prior", [&](const json& x, const std::string& q) {
      if (!x.is_array()) throw ConfigError(q + ": expected an array of numbers");
      d.synth.prior.clear();
      for (std::size_t i = 0; i < x.size(); ++i) d.synth.prior.push_back(as_double(x[i], q + "[" + std::to_string(i) + "]"));
    });
    s.finish();
  });
  f.finish();
}

// Synthetic images follow the model's input geometry and class count.
void sync_synth(RunConfig& c) {
  const bool cnn = c.model.family == Family::cnn;
  c.data.synth.classes = cnn ? c.model.cnn.num_classes : c.model.cct.num_classes;
  c.data.synth.channels = cnn ? c.model.cnn.in_channels : c.model.cct.in_channels;
  c.data.synth.image = cnn ? c.model.cnn.image : c.model.cct.image;
  if (!c.data.synth.prior.empty() && c.data.synth.prior.size() != c.data.synth.classes) {
    throw ConfigError("data.synth.prior: expected " + std::to_string(c.data.synth.classes) + " entries");
  }
}

json units_json(const std::vector<models::DyBcnnUnit>& units) {
  json a = json::array();
  for (const auto& u : units) a.push_back({{"out_channels", u.out_channels}, {"kernel", u.kernel}, {"stride", u.stride}});
  return a;
}

}  // namespace

models::LayerGraph ModelConfig::build() const {
  return family == Family::cnn ? models::build_dybcnn(cnn) : models::build_dybinarycct(cct);
}

std::vector<std::string> preset_names() {
  return {"dybcnn_micro", "dybinarycct_2", "reactnet", "dybcnn", "binarycct_6", "dybinarycct_6", "binarycct_7",
          "dybinarycct_7"};
}

RunConfig preset_config(const std::string& name) {
  RunConfig c;
  if (name == "dybcnn_micro") {
    auto m = models::dybcnn_micro();
    m.binarizer = BinarizerKind::dysign;
    m.activation = models::ActivationKind::dyprelu;
    c = cnn_preset(m, name, 20);
  } else if (name == "dybinarycct_2") {
    c = cct_preset(models::dybinarycct_2(), name, 20);
  } else if (name == "reactnet") {
    c = cnn_preset(models::reactnet_a(), name, 256);
  } else if (name == "dybcnn") {
    auto m = models::reactnet_a();
    m.binarizer = BinarizerKind::dysign;
    m.activation = models::ActivationKind::dyprelu;
    c = cnn_preset(m, name, 256);
  } else if (name == "binarycct_6" || name == "binarycct_7" || name == "dybinarycct_6" || name == "dybinarycct_7") {
    auto m = models::binarycct(name.back() == '6' ? 6 : 7);
    if (name.rfind("dy", 0) == 0) m.binarizer = BinarizerKind::dysign;
    c = cct_preset(m, name, 300);
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("model.preset: unknown preset '" + name + "' (known: " + known + ")");
  }
  c.out_dir = "runs/" + name;
  sync_synth(c);
  return c;
}

RunConfig resolve(const std::string& json_text, const Overrides& o) {
  json doc = json::object();
  if (!json_text.empty()) {
    try {
      doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
  }
  if (!doc.is_object()) throw ConfigError("config: expected an object");

  std::string preset = "dybinarycct_2";
  if (doc.contains("model") && doc["model"].is_object() && doc["model"].contains("preset")) {
    preset = as_string(doc["model"]["preset"], "model.preset");
  }
  if (o.preset) preset = *o.preset;
  RunConfig c = preset_config(preset);
  if (o.preset && doc.contains("model") && doc["model"].is_object()) doc["model"].erase("preset");

  Fields root(doc, "");
  root.opt("model", [&](const json& v, const std::string&) { apply_model(v, c.model); });
  root.opt("optim", [&](const json& v, const std::string&) { apply_optim(v, c.optim); });
  root.opt("data", [&](const json& v, const std::string&) { apply_data(v, c.data); });
  root.opt("seed", [&](const json& v, const std::string& p) { c.seed = as_u64(v, p); });
  root.opt("phase", [&](const json& v, const std::string& p) {
    const std::size_t ph = as_size(v, p, false);
    if (ph > 2) throw ConfigError(p + ": expected 0, 1 or 2");
    c.phase = static_cast<int>(ph);
  });
  root.opt("init_checkpoint", [&](const json& v, const std::string& p) { c.init_checkpoint = as_string(v, p); });
  root.opt("out_dir", [&](const json& v, const std::string& p) { c.out_dir = as_string(v, p); });
  root.finish();

  const bool cnn = c.model.family == Family::cnn;
  if (o.seed) c.seed = *o.seed;
  if (o.binarizer) {
    try {
      (cnn ? c.model.cnn.binarizer : c.model.cct.binarizer) = models::binarizer_from(*o.binarizer);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("--binarizer: ") + e.what());
    }
  }
  if (o.mode) {
    const auto mode = models::threshold_mode_from(*o.mode);
    if (cnn && mode != binarizers::ThresholdMode::channel) {
      throw ConfigError("--mode: convolutional presets only support channel-wise thresholds");
    }
    if (!cnn) c.model.cct.mode = mode;
  }
  if (o.gamma) {
    if (*o.gamma == 0) throw ConfigError("--gamma: must be positive");
    (cnn ? c.model.cnn.gamma : c.model.cct.gamma) = *o.gamma;
  }
  if (o.out_dir) c.out_dir = *o.out_dir;
  if (c.phase == 1) (cnn ? c.model.cnn.binary_weights : c.model.cct.binary_weights) = false;
  if (c.phase == 2 && c.init_checkpoint.empty()) throw ConfigError("init_checkpoint: required for phase 2");
  if (c.data.dataset == "cifar10" && c.data.cifar_dir.empty()) throw ConfigError("data.cifar_dir: required for cifar10");
  if (c.optim.distillation) {
    throw Unsupported("optim.distillation: the distribution-matching distillation loss is not supported");
  }
  sync_synth(c);
  c.model.build();  // surfaces structural errors (odd maps, heads) at config time
  return c;
}

RunConfig load_file(const std::string& path, const Overrides& o) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config: cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return resolve(ss.str(), o);
}

std::string to_json(const RunConfig& c, int indent) {
  json m;
  m["preset"] = c.model.preset;
  if (c.model.family == Family::cnn) {
    const auto& n = c.model.cnn;
    m["family"] = "cnn";
    m["binarizer"] = models::to_string(n.binarizer);
    m["activation"] = models::to_string(n.activation);
    m["gamma"] = n.gamma;
    m["image"] = n.image;
    m["in_channels"] = n.in_channels;
    m["num_classes"] = n.num_classes;
    m["binary_weights"] = n.binary_weights;
    m["stem_channels"] = n.stem_channels;
    m["stem_kernel"] = n.stem_kernel;
    m["stem_stride"] = n.stem_stride;
    m["units"] = units_json(n.units);
  } else {
    const auto& t = c.model.cct;
    m["family"] = "cct";
    m["binarizer"] = models::to_string(t.binarizer);
    m["mode"] = models::to_string(t.mode);
    m["gamma"] = t.gamma;
    m["image"] = t.image;
    m["in_channels"] = t.in_channels;
    m["num_classes"] = t.num_classes;
    m["binary_weights"] = t.binary_weights;
    m["layers"] = t.layers;
    m["embed"] = t.embed;
    m["heads"] = t.heads;
    m["mlp_ratio"] = t.mlp_ratio;
    m["hyper_gelu"] = t.hyper_gelu;
    m["shift_shape"] = models::to_string(t.shift_shape);
    m["tokenizer_kernel"] = t.tokenizer_kernel;
    m["tokenizer_stride"] = t.tokenizer_stride;
    m["tokenizer_padding"] = t.tokenizer_padding;
    m["pool_kernel"] = t.pool_kernel;
    m["pool_stride"] = t.pool_stride;
    m["pool_padding"] = t.pool_padding;
  }
  json j;
  j["model"] = m;
  j["optim"] = {{"lr", c.optim.adam.lr},
                {"beta1", c.optim.adam.beta1},
                {"beta2", c.optim.adam.beta2},
                {"eps", c.optim.adam.eps},
                {"weight_decay", c.optim.adam.weight_decay},
                {"schedule", c.optim.schedule},
                {"epochs", c.optim.epochs},
                {"batch_size", c.optim.batch_size},
                {"distillation", c.optim.distillation}};
  j["data"] = {{"dataset", c.data.dataset},
               {"cifar_dir", c.data.cifar_dir},
               {"augment", c.data.augment},
               {"shuffle", c.data.shuffle},
               {"limit_train", c.data.limit_train},
               {"limit_test", c.data.limit_test},
               {"synth",
                {{"train_samples", c.data.synth.train_samples},
                 {"test_samples", c.data.synth.test_samples},
                 {"separation", c.data.synth.separation},
                 {"noise", c.data.synth.noise},
                 {"prior", c.data.synth.prior}}}};
  j["seed"] = c.seed;
  j["phase"] = c.phase;
  j["init_checkpoint"] = c.init_checkpoint;
  j["out_dir"] = c.out_dir;
  return j.dump(indent);
}

double scheduled_lr(const OptimConfig& o, std::uint64_t step, std::uint64_t total_steps) {
  if (o.schedule == "constant" || total_steps == 0) return o.adam.lr;
  if (o.schedule == "cosine") {
    const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    return o.adam.lr * 0.5 * (1.0 + std::cos(M_PI * t));
  }
  return train::linear_decay(o.adam.lr, step, total_steps);
}

}  // namespace dybnn::config
