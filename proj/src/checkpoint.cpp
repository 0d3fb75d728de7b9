#include "dybnn/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <zlib.h>

#include "dybnn/error.hpp"

namespace dybnn::io {

namespace {

constexpr char kMagic[8] = {'B', 'N', 'N', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  void u8(std::uint8_t v) { out.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void blob(const Blob& b) {
    u32(static_cast<std::uint32_t>(b.name.size()));
    raw(b.name.data(), b.name.size());
    u8(static_cast<std::uint8_t>(b.dtype));
    u32(static_cast<std::uint32_t>(b.shape.size()));
    for (std::size_t d : b.shape) u64(d);
    u64(b.bytes.size());
    raw(b.bytes.data(), b.bytes.size());
  }
  void section(const std::vector<Blob>& blobs) {
    u64(blobs.size());
    for (const auto& b : blobs) blob(b);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n, std::string origin) : p_(p), n_(n), origin_(std::move(origin)) {}

  void need(std::size_t k) const {
    if (k > n_ - pos_) {
      throw CorruptionError(origin_ + ": truncated checkpoint at offset " + std::to_string(pos_));
    }
  }
  std::uint8_t u8() {
    need(1);
    return p_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[pos_++]) << (8 * i);
    return v;
  }
  std::string bytes_as_string(std::uint64_t k) {
    need(k);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), k);
    pos_ += k;
    return s;
  }
  std::string str() { return bytes_as_string(u64()); }
  Blob blob() {
    Blob b;
    b.name = bytes_as_string(u32());
    const std::uint8_t dt = u8();
    if (dt > 1) throw CorruptionError(origin_ + ": unknown dtype " + std::to_string(dt) + " for '" + b.name + "'");
    b.dtype = static_cast<DType>(dt);
    const std::uint32_t rank = u32();
    for (std::uint32_t i = 0; i < rank; ++i) b.shape.push_back(u64());
    const std::uint64_t len = u64();
    const std::size_t width = b.dtype == DType::f32 ? 4 : 8;
    if (len != numel(b.shape) * width) {
      throw CorruptionError(origin_ + ": tensor '" + b.name + "' byte count does not match its shape");
    }
    need(len);
    b.bytes.assign(p_ + pos_, p_ + pos_ + len);
    pos_ += len;
    return b;
  }
  std::vector<Blob> section() {
    const std::uint64_t count = u64();
    std::vector<Blob> out;
    for (std::uint64_t i = 0; i < count; ++i) out.push_back(blob());
    return out;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
  std::string origin_;
};

std::uint32_t crc_of(const std::uint8_t* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename T>
void capture_map(std::vector<Blob>& out, const std::map<std::string, Tensor<T>>& m) {
  for (const auto& [name, t] : m) out.push_back(to_blob(name, t));
}

}  // namespace

template <typename T>
Blob to_blob(const std::string& name, const Tensor<T>& t) {
  Blob b;
  b.name = name;
  b.dtype = sizeof(T) == 4 ? DType::f32 : DType::f64;
  b.shape = t.shape();
  b.bytes.reserve(t.size() * sizeof(T));
  for (const T& v : t.data()) {
    if constexpr (sizeof(T) == 4) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      for (int i = 0; i < 4; ++i) b.bytes.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
    } else {
      std::uint64_t u;
      std::memcpy(&u, &v, 8);
      for (int i = 0; i < 8; ++i) b.bytes.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
    }
  }
  return b;
}

template <typename T>
Tensor<T> from_blob(const Blob& b) {
  const std::size_t n = numel(b.shape);
  std::vector<T> vals(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (b.dtype == DType::f32) {
      std::uint32_t u = 0;
      for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(b.bytes[k * 4 + i]) << (8 * i);
      float f;
      std::memcpy(&f, &u, 4);
      vals[k] = static_cast<T>(f);
    } else {
      std::uint64_t u = 0;
      for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b.bytes[k * 8 + i]) << (8 * i);
      double d;
      std::memcpy(&d, &u, 8);
      vals[k] = static_cast<T>(d);
    }
  }
  return Tensor<T>(b.shape, std::move(vals));
}

std::vector<std::uint8_t> serialize(const CheckpointState& s) {
  Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.u32(kCheckpointVersion);
  w.str(s.config_json);
  w.str(s.metadata_json);
  w.u64(s.step);
  w.section(s.params);
  w.section(s.buffers);
  w.section(s.adam_m);
  w.section(s.adam_v);
  w.u32(crc_of(w.out.data(), w.out.size()));
  return std::move(w.out);
}

CheckpointState deserialize(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CorruptionError(origin + ": not a checkpoint (bad magic)");
  }
  Reader header(bytes.data() + sizeof(kMagic), 4, origin);
  const std::uint32_t version = header.u32();
  if (version != kCheckpointVersion) {
    throw VersionError(origin + ": checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body = bytes.size() - 4;
  Reader tail(bytes.data() + body, 4, origin);
  const std::uint32_t stored = tail.u32();
  if (crc_of(bytes.data(), body) != stored) throw CorruptionError(origin + ": checksum mismatch");

  Reader r(bytes.data() + sizeof(kMagic) + 4, body - sizeof(kMagic) - 4, origin);
  CheckpointState s;
  s.config_json = r.str();
  s.metadata_json = r.str();
  s.step = r.u64();
  s.params = r.section();
  s.buffers = r.section();
  s.adam_m = r.section();
  s.adam_v = r.section();
  if (r.pos() != body - sizeof(kMagic) - 4) throw CorruptionError(origin + ": trailing bytes after payload");
  return s;
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointState& state) {
  const std::vector<std::uint8_t> bytes = serialize(state);
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

CheckpointState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes, path.string());
}

template <typename T>
CheckpointState capture(const models::Model<T>& model, const train::Adam<T>* adam, std::uint64_t step,
                        std::string config_json, std::string metadata_json) {
  CheckpointState s;
  s.config_json = std::move(config_json);
  s.metadata_json = std::move(metadata_json);
  s.step = step;
  const auto& p = model.params();
  for (const auto& name : p.names()) s.params.push_back(to_blob(name, p.at(name).value()));
  for (const auto& name : p.buffer_names()) s.buffers.push_back(to_blob(name, p.buffer(name)));
  if (adam) {
    capture_map(s.adam_m, adam->first_moments());
    capture_map(s.adam_v, adam->second_moments());
  }
  return s;
}

template <typename T>
void restore(const CheckpointState& s, models::Model<T>& model, train::Adam<T>* adam) {
  auto& p = model.params();
  std::map<std::string, const Blob*> params, buffers;
  for (const auto& b : s.params) params[b.name] = &b;
  for (const auto& b : s.buffers) buffers[b.name] = &b;
  auto fetch = [](const std::map<std::string, const Blob*>& m, const std::string& name, const Shape& shape,
                  const char* what) -> const Blob& {
    auto it = m.find(name);
    if (it == m.end()) throw DataError(std::string("checkpoint lacks ") + what + " '" + name + "'");
    if (it->second->shape != shape) {
      throw DataError(std::string("checkpoint ") + what + " '" + name + "' has shape " + shape_str(it->second->shape) +
                      ", model expects " + shape_str(shape));
    }
    return *it->second;
  };
  for (const auto& name : p.names()) {
    Var<T>& v = p.at(name);
    v.mutable_value() = from_blob<T>(fetch(params, name, v.value().shape(), "parameter"));
  }
  for (const auto& name : p.buffer_names()) {
    Tensor<T>& t = p.buffer(name);
    t = from_blob<T>(fetch(buffers, name, t.shape(), "buffer"));
  }
  if (adam) {
    adam->first_moments().clear();
    adam->second_moments().clear();
    for (const auto& b : s.adam_m) adam->first_moments()[b.name] = from_blob<T>(b);
    for (const auto& b : s.adam_v) adam->second_moments()[b.name] = from_blob<T>(b);
    adam->set_steps(s.step);
  }
}

#define DYBNN_INSTANTIATE(T)                                                                         \
  template Blob to_blob<T>(const std::string&, const Tensor<T>&);                                    \
  template Tensor<T> from_blob<T>(const Blob&);                                                      \
  template CheckpointState capture<T>(const models::Model<T>&, const train::Adam<T>*, std::uint64_t, \
                                      std::string, std::string);                                     \
  template void restore<T>(const CheckpointState&, models::Model<T>&, train::Adam<T>*);

DYBNN_INSTANTIATE(float)
DYBNN_INSTANTIATE(double)
#undef DYBNN_INSTANTIATE

}  // namespace dybnn::io
