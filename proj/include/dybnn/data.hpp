#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dybnn/rng.hpp"
#include "dybnn/tensor.hpp"

namespace dybnn::data {

// Per-channel normalisation applied when batches are materialised.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
};

NormStats cifar10_norm();

// Images stored as channel-planar bytes; normalised on the fly.
struct Dataset {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 10;
  std::vector<std::uint8_t> pixels;  // size() * channels * height * width
  std::vector<std::int32_t> labels;
  NormStats norm;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return channels * height * width; }
  // FNV-1a over labels and pixels.
  std::uint64_t digest() const;
};

struct LabeledBatch {
  Tensor<float> images;  // [N, C, H, W], normalised
  std::vector<std::int32_t> labels;
};

struct Cifar10 {
  Dataset train;
  Dataset test;
};

// Reads data_batch_1..5.bin and test_batch.bin (3073-byte records). Missing
// or truncated files raise IngestionError naming the file and byte offset.
Cifar10 load_cifar10(const std::filesystem::path& dir);

// Reads one CIFAR-10 batch file into `out`.
void read_cifar10_file(const std::filesystem::path& file, Dataset& out);

struct SynthSpec {
  std::size_t classes = 10;
  std::size_t train_samples = 2000;
  std::size_t test_samples = 500;
  std::size_t channels = 3;
  std::size_t image = 32;
  double separation = 1.0;  // prototype amplitude
  double noise = 0.5;       // per-pixel Gaussian noise
  std::vector<double> prior;  // class probabilities; uniform when empty
};

struct SynthData {
  Dataset train;
  Dataset test;
};

// Gaussian clusters around smooth per-class prototype images, quantised to
// bytes. Normalisation statistics are measured on the training split.
SynthData synth_dataset(const SynthSpec& spec, std::uint64_t seed);

// Per-channel mean and standard deviation of raw pixels scaled to [0, 1].
NormStats measure_norm(const Dataset& d);

struct Augment {
  bool flip = true;
  std::size_t pad = 4;  // pad-crop border; 0 disables
};

// Gathers `indices` into a normalised batch, applying seeded augmentation
// when `augment` is given.
LabeledBatch make_batch(const Dataset& d, std::span<const std::size_t> indices, const Augment* augment = nullptr,
                        Rng* rng = nullptr);

// Epoch order: identity, or a Fisher-Yates shuffle seeded by (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, bool shuffle, std::uint64_t seed, std::uint64_t epoch);

}  // namespace dybnn::data
