#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "dybnn/checkpoint.hpp"
#include "dybnn/cli.hpp"
#include "dybnn/config.hpp"
#include "dybnn/costmodel.hpp"

using namespace dybnn;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dybnn_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string tiny_json(const fs::path& out, const std::string& top = "") {
  return R"({"model": {"preset": "dybinarycct_2", "image": 8, "embed": 16, "heads": 2},
             "optim": {"epochs": 2, "batch_size": 16},
             "data": {"synth": {"train_samples": 48, "test_samples": 16}},
             "out_dir": ")" +
         out.string() + "\"" + top + "}";
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct CliResult {
  int code = 0;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "bnn");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string config_error(const std::string& json) {
  try {
    config::resolve(json);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("identical configs and seeds give identical metric streams and checkpoints") {
  const auto dir = scratch_dir("determinism");
  std::ostringstream log;
  const auto a = cli::train(config::resolve(tiny_json(dir / "a")), log);
  const auto b = cli::train(config::resolve(tiny_json(dir / "b")), log);
  REQUIRE(a.epochs.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(a.epochs[e].train_loss == b.epochs[e].train_loss);
    CHECK(a.epochs[e].test_acc == b.epochs[e].test_acc);
  }
  CHECK(read_file(dir / "a" / "metrics.jsonl") == read_file(dir / "b" / "metrics.jsonl"));
  const auto sa = io::load_checkpoint(dir / "a" / "checkpoint.bnn");
  const auto sb = io::load_checkpoint(dir / "b" / "checkpoint.bnn");
  CHECK(sa.params.size() == sb.params.size());
  for (std::size_t i = 0; i < sa.params.size(); ++i) CHECK(sa.params[i].bytes == sb.params[i].bytes);

  config::Overrides o;
  o.seed = 1;
  const auto c = cli::train(config::resolve(tiny_json(dir / "c"), o), log);
  CHECK(c.epochs.back().train_loss != a.epochs.back().train_loss);
  fs::remove_all(dir);
}

TEST_CASE("a run directory holds its resolved config, metrics and checkpoint") {
  const auto dir = scratch_dir("artifacts");
  const auto r = run_cli({"train", "--config", (dir / "cfg.json").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("cfg.json") != std::string::npos);
  std::ofstream(dir / "cfg.json") << tiny_json(dir / "run");
  const auto t = run_cli({"train", "--config", (dir / "cfg.json").string()});
  REQUIRE(t.code == 0);
  const auto resolved = config::load_file((dir / "run" / "config.json").string());
  CHECK(config::to_json(resolved) + "\n" == read_file(dir / "run" / "config.json"));
  std::ifstream metrics(dir / "run" / "metrics.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(metrics, line);) {
    CHECK(line.find("\"test_acc\"") != std::string::npos);
    ++lines;
  }
  CHECK(lines == 2);

  const auto e = run_cli({"eval", (dir / "run" / "checkpoint.bnn").string()});
  CHECK(e.code == 0);
  CHECK(e.out.find("test_acc") != std::string::npos);
  const auto i = run_cli({"inspect", (dir / "run" / "checkpoint.bnn").string()});
  CHECK(i.code == 0);
  CHECK(i.out.find("encoder0.attn.site.in") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("a second phase starts from the first-phase checkpoint") {
  const auto dir = scratch_dir("phases");
  std::ostringstream log;
  const auto c1 = config::resolve(tiny_json(dir / "p1", R"(, "phase": 1)"));
  CHECK(c1.phase == 1);
  CHECK_FALSE(c1.model.cct.binary_weights);
  cli::train(c1, log);
  const auto init = (dir / "p1" / "checkpoint.bnn").string();
  const auto c2 = config::resolve(tiny_json(dir / "p2", R"(, "phase": 2, "init_checkpoint": ")" + init + "\""));
  CHECK(c2.model.cct.binary_weights);
  const auto r = cli::train(c2, log);
  CHECK(r.epochs.size() == 2);
  CHECK(config_error(R"({"phase": 2})").find("init_checkpoint") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("binarizer choice changes the resolved config and the parameter count") {
  config::Overrides s, d;
  s.binarizer = "sign";
  d.binarizer = "dysign";
  const auto cs = config::resolve(R"({"model": {"preset": "dybinarycct_2"}})", s);
  const auto cd = config::resolve(R"({"model": {"preset": "dybinarycct_2"}})", d);
  CHECK(config::to_json(cs) != config::to_json(cd));
  const auto ps = cost::count_ops(cs.model.build()).params;
  const auto pd = cost::count_ops(cd.model.build()).params;
  CHECK(pd > ps);
}

TEST_CASE("config errors carry the field path") {
  CHECK(config_error(R"({"model": {"bogus": 1}})").find("model.bogus") != std::string::npos);
  CHECK(config_error(R"({"optim": {"epochs": "many"}})").find("optim.epochs") != std::string::npos);
  CHECK(config_error(R"({"model": {"preset": "nope"}})").find("model.preset") != std::string::npos);
  CHECK(config_error(R"({"model": {"preset": "dybcnn_micro", "mode": "token"}})").find("mode") != std::string::npos);
  CHECK(config_error(R"({"model": {"embed": 30, "heads": 4}})").size() > 0);
  CHECK(config_error(R"({"data": {"dataset": "cifar10"}})").find("cifar_dir") != std::string::npos);
  CHECK_THROWS_AS(config::resolve("{not json"), ConfigError);
}

TEST_CASE("distillation is declared but unsupported") {
  CHECK_THROWS_AS(config::resolve(R"({"optim": {"distillation": true}})"), Unsupported);
}

TEST_CASE("every preset resolves and round-trips through its serialized form") {
  for (const auto& name : config::preset_names()) {
    config::Overrides o;
    o.preset = name;
    const auto c = config::resolve("{}", o);
    CHECK(c.model.preset == name);
    CHECK(config::to_json(config::resolve(config::to_json(c))) == config::to_json(c));
  }
}

TEST_CASE("learning-rate schedules") {
  config::OptimConfig o;
  o.adam.lr = 1e-3;
  o.schedule = "linear";
  CHECK(config::scheduled_lr(o, 50, 100) == doctest::Approx(5e-4));
  o.schedule = "cosine";
  CHECK(config::scheduled_lr(o, 0, 100) == doctest::Approx(1e-3));
  CHECK(config::scheduled_lr(o, 50, 100) == doctest::Approx(5e-4));
  CHECK(config::scheduled_lr(o, 100, 100) == doctest::Approx(0.0));
  o.schedule = "constant";
  CHECK(config::scheduled_lr(o, 99, 100) == doctest::Approx(1e-3));
}

TEST_CASE("cost command reports the sign to dysign delta") {
  config::Overrides s, d;
  s.preset = d.preset = "dybcnn_micro";
  s.binarizer = "sign";
  d.binarizer = "dysign";
  std::ostringstream out;
  auto cs = config::resolve("{}", s);
  cs.model.cnn.activation = models::ActivationKind::rprelu;
  auto cd = config::resolve("{}", d);
  cd.model.cnn.activation = models::ActivationKind::rprelu;
  const auto rs = cli::cost(cs, out, false);
  const auto rd = cli::cost(cd, out, false);
  std::uint64_t expect = 0;
  for (const auto& l : cd.model.build().layers)
    if (l.kind == models::LayerKind::dysign) expect += cost::dysign_overhead(l.in_shape[0], l.gamma);
  CHECK(rd.flops - rs.flops == expect);
  CHECK(out.str().find("OPs") != std::string::npos);
}

TEST_CASE("cost of an empty encoder has no binary operations") {
  const auto c = config::resolve(R"({"model": {"preset": "dybinarycct_2", "layers": 0}})");
  std::ostringstream out;
  CHECK(cli::cost(c, out, false).bops == 0);
}

TEST_CASE("cost command writes a machine-readable copy when asked") {
  const auto dir = scratch_dir("cost");
  const auto r = run_cli({"cost", "--preset", "reactnet", "--out", dir.string()});
  CHECK(r.code == 0);
  const auto j = read_file(dir / "cost.json");
  CHECK(j.find("\"bops\"") != std::string::npos);
  CHECK(j.find("4816896000") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("bench verifies before timing and rejects zero repeats") {
  std::ostringstream out;
  const auto rows = cli::bench({8, 33}, 1, 0, out);
  CHECK(rows.size() == 2);
  CHECK_THROWS_AS(cli::bench({8}, 0, 0, out), ArgumentError);
  CHECK(run_cli({"bench", "--repeats", "0"}).code == 1);
  CHECK(run_cli({"bench", "--sizes", "16", "--repeats", "1"}).code == 0);
}

TEST_CASE("exit codes distinguish usage and data errors") {
  CHECK(run_cli({"frobnicate"}).code == 1);
  CHECK(run_cli({"cost", "--binarizer", "maybe"}).code == 1);
  const auto missing = run_cli({"inspect", "/nonexistent/ckpt.bnn"});
  CHECK(missing.code == 2);
  CHECK(missing.err.find("/nonexistent/ckpt.bnn") != std::string::npos);
  CHECK(run_cli({"eval", "/nonexistent/ckpt.bnn"}).code == 2);
  CHECK(NumericFault("x", "y").exit_code() == 3);
}
