#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dybnn/data.hpp"
#include "dybnn/models.hpp"
#include "dybnn/train.hpp"

namespace dybnn::config {

enum class Family { cnn, cct };

struct ModelConfig {
  std::string preset = "dybinarycct_2";
  Family family = Family::cct;
  models::DyBcnnConfig cnn;
  models::CctConfig cct;

  models::LayerGraph build() const;
};

struct OptimConfig {
  train::AdamConfig adam;
  std::string schedule = "linear";  // linear | cosine | constant
  std::size_t epochs = 20;
  std::size_t batch_size = 256;
  bool distillation = false;
};

struct DataConfig {
  std::string dataset = "synthetic";  // synthetic | cifar10
  std::string cifar_dir;
  bool augment = true;
  bool shuffle = true;
  std::size_t limit_train = 0;  // 0 keeps every record
  std::size_t limit_test = 0;
  data::SynthSpec synth;
};

struct RunConfig {
  ModelConfig model;
  OptimConfig optim;
  DataConfig data;
  std::uint64_t seed = 0;
  int phase = 0;  // 0 single phase, 1 real weights, 2 binary weights from a phase-1 checkpoint
  std::string init_checkpoint;
  std::string out_dir = "runs/default";
};

// Command-line overrides, applied after the config document.
struct Overrides {
  std::optional<std::string> preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> binarizer;
  std::optional<std::string> mode;
  std::optional<std::size_t> gamma;
  std::optional<std::string> out_dir;
};

std::vector<std::string> preset_names();

// Defaults of a named preset; ConfigError for unknown names.
RunConfig preset_config(const std::string& name);

// Resolves a JSON document (may be empty) plus overrides. The preset is taken
// from the overrides, then the document, then the default; the document's
// fields override the preset. Unknown keys and type errors raise ConfigError
// naming the field path.
RunConfig resolve(const std::string& json_text, const Overrides& o = {});
RunConfig load_file(const std::string& path, const Overrides& o = {});

// Every field, fully expanded.
std::string to_json(const RunConfig& c, int indent = 2);

double scheduled_lr(const OptimConfig& o, std::uint64_t step, std::uint64_t total_steps);

}  // namespace dybnn::config
