#include "dybnn/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dybnn/bitkernel.hpp"
#include "dybnn/checkpoint.hpp"
#include "dybnn/error.hpp"
#include "dybnn/ops.hpp"

namespace dybnn::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

void truncate(data::Dataset& d, std::size_t limit) {
  if (limit == 0 || limit >= d.size()) return;
  d.labels.resize(limit);
  d.pixels.resize(limit * d.sample_size());
}

std::string metadata_json(const data::NormStats& norm, const config::RunConfig& cfg, std::size_t epochs_done) {
  json m;
  m["norm"] = {{"mean", norm.mean}, {"std", norm.std}};
  m["dataset"] = cfg.data.dataset;
  m["phase"] = cfg.phase;
  m["epochs_completed"] = epochs_done;
  return m.dump();
}

data::NormStats norm_from_metadata(const std::string& text) {
  data::NormStats n;
  try {
    const json m = json::parse(text);
    n.mean = m.at("norm").at("mean").get<std::vector<double>>();
    n.std = m.at("norm").at("std").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("checkpoint metadata is unreadable: ") + e.what());
  }
  return n;
}

json metrics_json(const EpochMetrics& m) {
  return {{"phase", m.phase},           {"epoch", m.epoch},         {"step", m.step},
          {"lr", m.lr},                 {"train_loss", m.train_loss}, {"train_acc", m.train_acc},
          {"test_loss", m.test_loss},   {"test_acc", m.test_acc}};
}

// Mean loss and accuracy over a dataset in fixed order.
std::pair<double, double> run_eval(models::Model<float>& model, const data::Dataset& d, std::size_t batch) {
  if (d.size() == 0) return {0.0, 0.0};
  double loss = 0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx(batch);
  for (std::size_t start = 0; start < d.size(); start += batch) {
    const std::size_t n = std::min(batch, d.size() - start);
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
    const data::LabeledBatch b = data::make_batch(d, idx);
    const train::StepResult r = train::evaluate(model, b.images, b.labels);
    loss += r.loss * static_cast<double>(n);
    correct += r.correct;
  }
  return {loss / static_cast<double>(d.size()), static_cast<double>(correct) / static_cast<double>(d.size())};
}

std::string fmt_count(double v) {
  std::ostringstream s;
  s << std::setprecision(4) << std::scientific << v;
  return s.str();
}

template <typename T>
std::string stats_line(const Tensor<T>& t) {
  double mn = INFINITY, mx = -INFINITY, sum = 0, sq = 0;
  for (const T& v : t.data()) {
    const auto d = static_cast<double>(v);
    mn = std::min(mn, d);
    mx = std::max(mx, d);
    sum += d;
    sq += d * d;
  }
  const double n = static_cast<double>(t.size());
  const double mean = sum / n;
  const double var = std::max(0.0, sq / n - mean * mean);
  std::ostringstream s;
  s << std::setprecision(5) << std::setw(12) << mn << std::setw(12) << mean << std::setw(12) << mx << std::setw(12)
    << var;
  return s.str();
}

}  // namespace

Datasets load_datasets(const config::RunConfig& cfg) {
  Datasets d;
  if (cfg.data.dataset == "cifar10") {
    data::Cifar10 c = data::load_cifar10(cfg.data.cifar_dir);
    d.train = std::move(c.train);
    d.test = std::move(c.test);
  } else {
    data::SynthData s = data::synth_dataset(cfg.data.synth, hash_name(cfg.seed, "data"));
    d.train = std::move(s.train);
    d.test = std::move(s.test);
  }
  truncate(d.train, cfg.data.limit_train);
  truncate(d.test, cfg.data.limit_test);
  const models::LayerGraph g = cfg.model.build();
  if (Shape{d.train.channels, d.train.height, d.train.width} != g.input_shape) {
    throw ConfigError("dataset images " + shape_str(Shape{d.train.channels, d.train.height, d.train.width}) +
                      " do not match model input " + shape_str(g.input_shape));
  }
  if (d.train.num_classes > g.num_classes) {
    throw ConfigError("dataset has " + std::to_string(d.train.num_classes) + " classes, model only " +
                      std::to_string(g.num_classes));
  }
  return d;
}

TrainResult train(const config::RunConfig& cfg, std::ostream& log) {
  if (cfg.optim.distillation) throw Unsupported("distillation loss is not supported");
  Datasets d = load_datasets(cfg);
  if (d.train.size() == 0) throw DataError("training split is empty");
  models::Model<float> model(cfg.model.build(), cfg.seed);
  train::Adam<float> adam(cfg.optim.adam);

  if (cfg.phase == 2) {
    const io::CheckpointState init = io::load_checkpoint(cfg.init_checkpoint);
    const config::RunConfig prev = config::resolve(init.config_json);
    if (prev.model.preset != cfg.model.preset) {
      throw ConfigError("init_checkpoint: trained for preset '" + prev.model.preset + "', this run uses '" +
                        cfg.model.preset + "'");
    }
    io::restore(init, model);
    log << "phase 2: initialised from " << cfg.init_checkpoint << " (step " << init.step << ")\n";
  }

  fs::create_directories(cfg.out_dir);
  {
    std::ofstream out(fs::path(cfg.out_dir) / "config.json");
    if (!out) throw IoError("cannot write " + (fs::path(cfg.out_dir) / "config.json").string());
    out << config::to_json(cfg) << "\n";
  }
  std::ofstream metrics(fs::path(cfg.out_dir) / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + (fs::path(cfg.out_dir) / "metrics.jsonl").string());

  TrainResult result;
  result.parameter_count = model.params().scalar_count();
  const std::size_t batch = cfg.optim.batch_size;
  const std::size_t per_epoch = (d.train.size() + batch - 1) / batch;
  const std::uint64_t total = per_epoch * cfg.optim.epochs;
  std::uint64_t step = 0;
  models::ForwardOptions fwd;
  fwd.training = true;
  const data::Augment aug;

  log << "training " << cfg.model.preset << " (" << result.parameter_count << " parameters) on "
      << d.train.size() << " samples for " << cfg.optim.epochs << " epochs\n";
  for (std::size_t epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    const auto order = data::epoch_order(d.train.size(), cfg.data.shuffle, cfg.seed, epoch);
    Rng aug_rng(hash_name(cfg.seed, "augment" + std::to_string(epoch)));
    double loss_sum = 0;
    std::size_t correct = 0;
    double lr = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t n = std::min(batch, order.size() - start);
      const std::span<const std::size_t> idx(order.data() + start, n);
      const data::LabeledBatch b =
          data::make_batch(d.train, idx, cfg.data.augment ? &aug : nullptr, cfg.data.augment ? &aug_rng : nullptr);
      const train::StepResult r = train::forward_backward(model, b.images, b.labels, fwd);
      lr = config::scheduled_lr(cfg.optim, step, total);
      adam.step(model.params(), lr);
      ++step;
      loss_sum += r.loss * static_cast<double>(n);
      correct += r.correct;
    }
    EpochMetrics m;
    m.phase = cfg.phase;
    m.epoch = epoch + 1;
    m.step = step;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(d.train.size());
    m.train_acc = static_cast<double>(correct) / static_cast<double>(d.train.size());
    std::tie(m.test_loss, m.test_acc) = run_eval(model, d.test, batch);
    metrics << metrics_json(m).dump() << "\n";
    metrics.flush();
    log << "epoch " << m.epoch << "/" << cfg.optim.epochs << "  loss " << std::fixed << std::setprecision(4)
        << m.train_loss << "  train " << m.train_acc << "  test " << m.test_acc << std::defaultfloat << "\n";
    result.epochs.push_back(m);
  }

  const fs::path ckpt = fs::path(cfg.out_dir) / "checkpoint.bnn";
  io::save_checkpoint(ckpt, io::capture(model, &adam, step, config::to_json(cfg, -1),
                                        metadata_json(d.train.norm, cfg, cfg.optim.epochs)));
  result.checkpoint_path = ckpt.string();
  log << "wrote " << ckpt.string() << "\n";
  return result;
}

EpochMetrics evaluate_checkpoint(const std::string& path, std::ostream& out) {
  const io::CheckpointState st = io::load_checkpoint(path);
  const config::RunConfig cfg = config::resolve(st.config_json);
  models::Model<float> model(cfg.model.build(), cfg.seed);
  io::restore(st, model);
  Datasets d = load_datasets(cfg);
  d.test.norm = norm_from_metadata(st.metadata_json);
  EpochMetrics m;
  m.phase = cfg.phase;
  m.step = st.step;
  std::tie(m.test_loss, m.test_acc) = run_eval(model, d.test, cfg.optim.batch_size);
  out << json{{"checkpoint", path}, {"step", st.step}, {"test_loss", m.test_loss}, {"test_acc", m.test_acc}}.dump()
      << "\n";
  return m;
}

std::string cost_json(const cost::CostReport& r, const std::string& preset) {
  json layers = json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"name", l.name}, {"kind", l.kind}, {"bops", l.bops}, {"flops", l.flops}, {"params", l.params}});
  }
  json j{{"preset", preset},
         {"convention", cost::to_string(r.convention)},
         {"layers", layers},
         {"totals", {{"bops", r.bops}, {"flops", r.flops}, {"ops", r.ops}, {"params", r.params}}}};
  if (const auto ref = cost::reference_for(preset)) {
    j["reference"] = {{"model", ref->model},
                      {"bops", ref->bops},
                      {"flops", ref->flops},
                      {"ops", ref->ops},
                      {"ops_relative_gap", (r.ops - ref->ops) / ref->ops}};
  }
  return j.dump(2);
}

cost::CostReport cost(const config::RunConfig& cfg, std::ostream& out, bool write_json,
                      std::optional<cost::CostConvention> convention) {
  const models::LayerGraph g = cfg.model.build();
  const cost::CostReport r = cost::count_ops(g, convention);
  out << std::left << std::setw(30) << "layer" << std::setw(18) << "kind" << std::right << std::setw(14) << "BOPs"
      << std::setw(14) << "FLOPs" << std::setw(12) << "params" << "\n";
  for (const auto& l : r.layers) {
    out << std::left << std::setw(30) << l.name << std::setw(18) << l.kind << std::right << std::setw(14) << l.bops
        << std::setw(14) << l.flops << std::setw(12) << l.params << "\n";
  }
  out << "total  BOPs " << fmt_count(static_cast<double>(r.bops)) << "  FLOPs " << fmt_count(static_cast<double>(r.flops))
      << "  OPs = BOPs/64 + FLOPs = " << fmt_count(r.ops) << "  params " << r.params << "  (convention "
      << cost::to_string(r.convention) << ")\n";
  if (const auto ref = cost::reference_for(cfg.model.preset)) {
    out << "reference " << ref->model << ": BOPs " << fmt_count(ref->bops) << "  FLOPs " << fmt_count(ref->flops)
        << "  OPs " << fmt_count(ref->ops) << "  -> computed OPs differ by " << std::fixed << std::setprecision(2)
        << 100.0 * (r.ops - ref->ops) / ref->ops << "%" << std::defaultfloat << "\n";
  }
  for (const auto& row : cost::reference_rows()) {
    if (row.identity_gap() > 0.01) {
      out << "note: published " << row.model << " OPs " << fmt_count(row.ops) << " differ from BOPs/64 + FLOPs = "
          << fmt_count(row.bops / 64.0 + row.flops) << " by " << std::fixed << std::setprecision(1)
          << 100.0 * row.identity_gap() << "%" << std::defaultfloat << "\n";
    }
  }
  if (write_json) {
    fs::create_directories(cfg.out_dir);
    const fs::path p = fs::path(cfg.out_dir) / "cost.json";
    std::ofstream f(p);
    if (!f) throw IoError("cannot write " + p.string());
    f << cost_json(r, cfg.model.preset) << "\n";
    out << "wrote " << p.string() << "\n";
  }
  return r;
}

std::vector<BenchRow> bench(const std::vector<std::size_t>& sizes, std::size_t repeats, std::uint64_t seed,
                            std::ostream& out) {
  if (repeats == 0) throw ArgumentError("--repeats must be at least 1");
  if (sizes.empty()) throw ArgumentError("--sizes must list at least one size");
  using clock = std::chrono::steady_clock;
  std::vector<BenchRow> rows;
  out << std::setw(8) << "n" << std::setw(14) << "float ms" << std::setw(14) << "packed ms" << std::setw(10)
      << "speedup" << "\n";
  for (std::size_t n : sizes) {
    if (n == 0) throw ArgumentError("--sizes entries must be positive");
    Rng rng(hash_name(seed, "bench" + std::to_string(n)));
    std::vector<float> a(n * n), b(n * n);
    for (auto& v : a) v = rng.uniform() < 0.5 ? -1.0f : 1.0f;
    for (auto& v : b) v = rng.uniform() < 0.5 ? -1.0f : 1.0f;
    auto float_gemm = [&] {
      std::vector<float> c(n * n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          float s = 0;
          for (std::size_t k = 0; k < n; ++k) s += a[i * n + k] * b[j * n + k];
          c[i * n + j] = s;
        }
      }
      return c;
    };
    const auto pa = bitkernel::pack_signs<float>(a, n, n);
    const auto pb = bitkernel::pack_signs<float>(b, n, n);
    const std::vector<float> ref = float_gemm();
    const bitkernel::IntMatrix got = bitkernel::binary_gemm(pa, pb);
    for (std::size_t i = 0; i < n * n; ++i) {
      if (static_cast<float>(got.data[i]) != ref[i]) {
        throw NumericFault("binary_gemm", "packed result differs from the float oracle at n=" + std::to_string(n));
      }
    }
    auto time_ms = [&](auto&& fn) {
      std::vector<double> t;
      for (std::size_t r = 0; r < repeats; ++r) {
        const auto t0 = clock::now();
        volatile auto sink = fn();
        (void)sink;
        t.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
      }
      std::sort(t.begin(), t.end());
      return t[t.size() / 2];
    };
    BenchRow row{n, time_ms([&] { return float_gemm()[0]; }), time_ms([&] { return bitkernel::binary_gemm(pa, pb).data[0]; })};
    out << std::setw(8) << n << std::fixed << std::setprecision(3) << std::setw(14) << row.float_ms << std::setw(14)
        << row.packed_ms << std::setprecision(1) << std::setw(9) << row.float_ms / std::max(row.packed_ms, 1e-9) << "x"
        << std::defaultfloat << "\n";
    rows.push_back(row);
  }
  return rows;
}

void inspect(const std::string& path, std::ostream& out) {
  const io::CheckpointState st = io::load_checkpoint(path);
  const config::RunConfig cfg = config::resolve(st.config_json);
  models::Model<float> model(cfg.model.build(), cfg.seed);
  io::restore(st, model);
  out << "checkpoint " << path << "  (format v" << io::kCheckpointVersion << ", step " << st.step << ")\n";
  out << "config " << config::to_json(cfg, -1) << "\n";
  out << "metadata " << st.metadata_json << "\n";

  std::map<std::string, std::size_t> census;
  std::vector<std::string> order;
  for (const auto& name : model.params().names()) {
    const std::string layer = name.substr(0, name.find(".site.") != std::string::npos ? name.find(".site.")
                                                                                       : name.rfind('.'));
    if (!census.count(layer)) order.push_back(layer);
    census[layer] += model.params().at(name).value().size();
  }
  out << "parameters " << model.params().scalar_count() << "\n";
  for (const auto& l : order) out << "  " << std::left << std::setw(40) << l << std::right << census[l] << "\n";

  // Probe batch drawn from a synthetic stream with the model's geometry.
  data::SynthSpec probe_spec = cfg.data.synth;
  probe_spec.train_samples = 8;
  probe_spec.test_samples = 1;
  data::Dataset probe = data::synth_dataset(probe_spec, hash_name(cfg.seed, "probe")).train;
  probe.norm = norm_from_metadata(st.metadata_json);
  std::vector<std::size_t> idx(probe.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const data::LabeledBatch b = data::make_batch(probe, idx);
  models::ForwardTrace<float> trace;
  {
    NoGradGuard guard;
    model.forward(b.images, {}, &trace);
  }
  out << "thresholds on a probe batch of " << probe.size() << " (min / mean / max / variance)\n";
  if (trace.thresholds.empty()) out << "  no learned thresholds (sign binarizers)\n";
  for (const auto& l : model.graph().layers) {
    for (const auto& [site, t] : trace.thresholds) {
      if (site == l.name || site.rfind(l.name + ".site.", 0) == 0) {
        out << "  " << std::left << std::setw(34) << site << std::right << stats_line(t) << "\n";
      }
    }
  }
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Binary neural network engine with dynamic-threshold binarizers"};
  app.require_subcommand(1);
  std::string config_path, preset, binarizer, mode, out_dir, convention, checkpoint;
  std::uint64_t seed = 0;
  std::size_t gamma = 0, repeats = 3;
  std::vector<std::size_t> sizes{64, 128, 256, 512};

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration");
    sub->add_option("--seed", seed, "Run seed");
    sub->add_option("--binarizer", binarizer, "Binarizer at every site")->check(CLI::IsMember({"sign", "rsign", "dysign"}));
    sub->add_option("--mode", mode, "Threshold mode")->check(CLI::IsMember({"channel", "token"}));
    sub->add_option("--gamma", gamma, "Hyperfunction reduction ratio");
    sub->add_option("--preset", preset, "Model preset");
    sub->add_option("--out", out_dir, "Output directory");
  };
  CLI::App* train_cmd = app.add_subcommand("train", "Train a model and write metrics, config and checkpoint");
  add_common(train_cmd);
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on its test split");
  eval_cmd->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  CLI::App* cost_cmd = app.add_subcommand("cost", "Print BOPs / FLOPs / OPs per layer");
  add_common(cost_cmd);
  cost_cmd->add_option("--convention", convention, "Cost convention")
      ->check(CLI::IsMember({"elementwise", "matmul_only"}));
  CLI::App* bench_cmd = app.add_subcommand("bench", "Benchmark packed against float +-1 GEMM");
  bench_cmd->add_option("--sizes", sizes, "Square sizes")->delimiter(',');
  bench_cmd->add_option("--repeats", repeats, "Timed repetitions per size");
  bench_cmd->add_option("--seed", seed, "Seed for the random operands");
  CLI::App* inspect_cmd = app.add_subcommand("inspect", "Summarise a checkpoint");
  inspect_cmd->add_option("checkpoint", checkpoint, "Checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return e.get_exit_code() == 0 ? 0 : 1;
  }

  auto resolve_cfg = [&](CLI::App* sub) {
    config::Overrides o;
    if (sub->count("--preset")) o.preset = preset;
    if (sub->count("--seed")) o.seed = seed;
    if (sub->count("--binarizer")) o.binarizer = binarizer;
    if (sub->count("--mode")) o.mode = mode;
    if (sub->count("--gamma")) o.gamma = gamma;
    if (sub->count("--out")) o.out_dir = out_dir;
    return config_path.empty() ? config::resolve("", o) : config::load_file(config_path, o);
  };

  try {
    if (*train_cmd) {
      train(resolve_cfg(train_cmd), out);
    } else if (*eval_cmd) {
      evaluate_checkpoint(checkpoint, out);
    } else if (*cost_cmd) {
      std::optional<cost::CostConvention> conv;
      if (!convention.empty()) conv = cost::convention_from(convention);
      cost(resolve_cfg(cost_cmd), out, cost_cmd->count("--out") > 0, conv);
    } else if (*bench_cmd) {
      bench(sizes, repeats, seed, out);
    } else if (*inspect_cmd) {
      inspect(checkpoint, out);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace dybnn::cli
