#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dybnn/config.hpp"
#include "dybnn/costmodel.hpp"
#include "dybnn/data.hpp"

// Commands behind the `bnn` executable. Each returns normally on success and
// throws dybnn::Error (carrying its exit code) on failure.
namespace dybnn::cli {

struct EpochMetrics {
  int phase = 0;
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double test_loss = 0;
  double test_acc = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  std::size_t parameter_count = 0;
  std::string checkpoint_path;
};

struct Datasets {
  data::Dataset train;
  data::Dataset test;
};

// Training and test splits selected by the config, with limits applied.
Datasets load_datasets(const config::RunConfig& cfg);

// Trains per `cfg`, writing config.json, metrics.jsonl and checkpoint.bnn
// into cfg.out_dir. Progress lines go to `log`.
TrainResult train(const config::RunConfig& cfg, std::ostream& log);

// Loss and accuracy of a checkpoint on its configured test split.
EpochMetrics evaluate_checkpoint(const std::string& path, std::ostream& out);

// Prints the per-layer table and totals; writes cost.json into cfg.out_dir
// when `write_json` is set.
cost::CostReport cost(const config::RunConfig& cfg, std::ostream& out, bool write_json,
                      std::optional<cost::CostConvention> convention = std::nullopt);

std::string cost_json(const cost::CostReport& r, const std::string& preset);

struct BenchRow {
  std::size_t n = 0;
  double float_ms = 0;
  double packed_ms = 0;
};

// Packed vs float +-1 GEMM at n x n x n. Results are compared for exact
// equality before anything is timed.
std::vector<BenchRow> bench(const std::vector<std::size_t>& sizes, std::size_t repeats, std::uint64_t seed,
                            std::ostream& out);

// Config, parameter census and per-site threshold statistics on a probe batch.
void inspect(const std::string& path, std::ostream& out);

// Full command-line entry point; returns the process exit code.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace dybnn::cli
