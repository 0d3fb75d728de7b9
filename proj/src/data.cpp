#include "dybnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "dybnn/error.hpp"

namespace dybnn::data {

namespace {

constexpr std::size_t kCifarRecord = 3073;

std::uint8_t to_byte(double v) {
  const double b = std::round(128.0 + 48.0 * v);
  return static_cast<std::uint8_t>(std::clamp(b, 0.0, 255.0));
}

// Smooth random pattern: a few low-frequency cosines per channel.
std::vector<double> prototype(Rng& rng, std::size_t c, std::size_t s) {
  std::vector<double> img(c * s * s, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (int k = 0; k < 3; ++k) {
      const double fx = rng.uniform(0.5, 2.5), fy = rng.uniform(0.5, 2.5);
      const double px = rng.uniform(0, 2 * M_PI), py = rng.uniform(0, 2 * M_PI);
      const double amp = rng.normal();
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          const double u = static_cast<double>(x) / static_cast<double>(s);
          const double v = static_cast<double>(y) / static_cast<double>(s);
          img[(ch * s + y) * s + x] += amp * std::cos(2 * M_PI * fx * u + px) * std::cos(2 * M_PI * fy * v + py);
        }
      }
    }
  }
  double sq = 0;
  for (double v : img) sq += v * v;
  const double scale = 1.0 / std::sqrt(sq / static_cast<double>(img.size()) + 1e-12);
  for (double& v : img) v *= scale;
  return img;
}

void render(Dataset& d, std::size_t n, const std::vector<std::vector<double>>& protos, const std::vector<double>& cdf,
            const SynthSpec& spec, Rng& rng) {
  const std::size_t ss = d.sample_size();
  d.labels.resize(n);
  d.pixels.resize(n * ss);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    const auto cls = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end() - 1, u) - cdf.begin());
    d.labels[i] = static_cast<std::int32_t>(cls);
    for (std::size_t j = 0; j < ss; ++j) {
      d.pixels[i * ss + j] = to_byte(spec.separation * protos[cls][j] + spec.noise * rng.normal());
    }
  }
}

}  // namespace

NormStats cifar10_norm() { return {{0.4914, 0.4822, 0.4465}, {0.2470, 0.2435, 0.2616}}; }

std::uint64_t Dataset::digest() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint8_t b) {
    h ^= b;
    h *= 1099511628211ULL;
  };
  for (std::int32_t l : labels) {
    for (int k = 0; k < 4; ++k) mix(static_cast<std::uint8_t>(static_cast<std::uint32_t>(l) >> (8 * k)));
  }
  for (std::uint8_t p : pixels) mix(p);
  return h;
}

void read_cifar10_file(const std::filesystem::path& file, Dataset& out) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + file.string() + " (offset 0)");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw IngestionError(file.string() + ": empty file at offset 0");
  const std::size_t whole = bytes.size() / kCifarRecord;
  if (bytes.size() % kCifarRecord != 0) {
    throw IngestionError(file.string() + ": truncated record at offset " + std::to_string(whole * kCifarRecord) +
                         " (file is " + std::to_string(bytes.size()) + " bytes)");
  }
  const std::size_t ss = out.sample_size();
  for (std::size_t r = 0; r < whole; ++r) {
    const std::size_t off = r * kCifarRecord;
    const auto label = static_cast<std::uint8_t>(bytes[off]);
    if (label >= out.num_classes) {
      throw IngestionError(file.string() + ": label " + std::to_string(label) + " out of range at offset " +
                           std::to_string(off));
    }
    out.labels.push_back(label);
    const auto* px = reinterpret_cast<const std::uint8_t*>(bytes.data() + off + 1);
    out.pixels.insert(out.pixels.end(), px, px + ss);
  }
}

Cifar10 load_cifar10(const std::filesystem::path& dir) {
  Cifar10 c;
  for (Dataset* d : {&c.train, &c.test}) {
    d->norm = cifar10_norm();
  }
  for (int i = 1; i <= 5; ++i) read_cifar10_file(dir / ("data_batch_" + std::to_string(i) + ".bin"), c.train);
  read_cifar10_file(dir / "test_batch.bin", c.test);
  return c;
}

NormStats measure_norm(const Dataset& d) {
  NormStats s;
  const std::size_t plane = d.height * d.width;
  for (std::size_t ch = 0; ch < d.channels; ++ch) {
    double sum = 0, sq = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const std::uint8_t* p = d.pixels.data() + i * d.sample_size() + ch * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const double v = p[k] / 255.0;
        sum += v;
        sq += v * v;
      }
    }
    const double n = static_cast<double>(d.size() * plane);
    const double mean = n > 0 ? sum / n : 0.0;
    const double var = n > 0 ? std::max(sq / n - mean * mean, 0.0) : 0.0;
    s.mean.push_back(mean);
    s.std.push_back(var > 1e-12 ? std::sqrt(var) : 1.0);
  }
  return s;
}

SynthData synth_dataset(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.classes == 0) throw ArgumentError("synthetic dataset needs at least one class");
  if (spec.channels == 0 || spec.image == 0) throw ArgumentError("synthetic images need positive extents");
  std::vector<double> prior = spec.prior;
  if (prior.empty()) prior.assign(spec.classes, 1.0 / static_cast<double>(spec.classes));
  if (prior.size() != spec.classes) throw ArgumentError("class prior length differs from class count");
  double total = 0;
  for (double p : prior) {
    if (!(p >= 0)) throw ArgumentError("class prior entries must be non-negative");
    total += p;
  }
  if (!(total > 0)) throw ArgumentError("class prior sums to zero");
  std::vector<double> cdf(prior.size());
  double acc = 0;
  for (std::size_t i = 0; i < prior.size(); ++i) cdf[i] = (acc += prior[i] / total);

  Rng proto_rng(hash_name(seed, "prototypes"));
  std::vector<std::vector<double>> protos;
  for (std::size_t k = 0; k < spec.classes; ++k) protos.push_back(prototype(proto_rng, spec.channels, spec.image));

  SynthData out;
  for (Dataset* d : {&out.train, &out.test}) {
    d->channels = spec.channels;
    d->height = d->width = spec.image;
    d->num_classes = spec.classes;
  }
  Rng train_rng(hash_name(seed, "train"));
  Rng test_rng(hash_name(seed, "test"));
  render(out.train, spec.train_samples, protos, cdf, spec, train_rng);
  render(out.test, spec.test_samples, protos, cdf, spec, test_rng);
  out.train.norm = measure_norm(out.train);
  out.test.norm = out.train.norm;
  return out;
}

LabeledBatch make_batch(const Dataset& d, std::span<const std::size_t> indices, const Augment* augment, Rng* rng) {
  if (augment && !rng) throw ArgumentError("augmentation needs a random stream");
  if (d.norm.mean.size() != d.channels || d.norm.std.size() != d.channels) {
    throw ArgumentError("normalisation statistics do not match the channel count");
  }
  const std::size_t c = d.channels, h = d.height, w = d.width, ss = d.sample_size();
  LabeledBatch b{Tensor<float>(Shape{indices.size(), c, h, w}), {}};
  float* out = b.images.ptr();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= d.size()) throw ArgumentError("batch index " + std::to_string(src) + " beyond dataset");
    b.labels.push_back(d.labels[src]);
    bool flip = false;
    long dy = 0, dx = 0;
    if (augment) {
      flip = augment->flip && rng->uniform() < 0.5;
      if (augment->pad > 0) {
        const auto span = 2 * augment->pad + 1;
        dy = static_cast<long>(rng->below(span)) - static_cast<long>(augment->pad);
        dx = static_cast<long>(rng->below(span)) - static_cast<long>(augment->pad);
      }
    }
    const std::uint8_t* px = d.pixels.data() + src * ss;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const auto mean = static_cast<float>(d.norm.mean[ch]);
      const auto inv = static_cast<float>(1.0 / d.norm.std[ch]);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const long sy = static_cast<long>(y) + dy;
          long sx = static_cast<long>(x) + dx;
          if (flip) sx = static_cast<long>(w) - 1 - sx;
          float v = 0.0f;  // zero padding in raw pixel space
          if (sy >= 0 && sy < static_cast<long>(h) && sx >= 0 && sx < static_cast<long>(w)) {
            v = px[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] / 255.0f;
          }
          out[((i * c + ch) * h + y) * w + x] = (v - mean) * inv;
        }
      }
    }
  }
  return b;
}

std::vector<std::size_t> epoch_order(std::size_t n, bool shuffle, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(hash_name(seed, "epoch" + std::to_string(epoch)));
    rng.shuffle(idx.begin(), idx.end());
  }
  return idx;
}

}  // namespace dybnn::data
