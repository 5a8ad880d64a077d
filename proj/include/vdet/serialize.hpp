#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vdet/error.hpp"
#include "vdet/image.hpp"
#include "vdet/layers.hpp"
#include "vdet/network.hpp"

namespace vdet {

// Binary model container. Layout (all integers little-endian, floats
// IEEE-754 little-endian) is documented in docs/model_format.md.
inline constexpr char kModelMagic[4] = {'T', 'S', 'D', '1'};
inline constexpr std::uint32_t kModelVersion = 1;

enum class BlockType : std::uint8_t { kSequential = 1, kMatrix = 2 };

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  std::uint8_t u8() { return *take(1); }
  std::uint32_t u32() {
    const std::uint8_t* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const std::uint8_t* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    const std::uint8_t* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  const std::uint8_t* take(std::size_t n) {
    if (n > size_ - pos_) {
      throw FormatError("model file truncated at byte offset " + std::to_string(pos_));
    }
    const std::uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == size_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename T>
void write_sequential(ByteWriter& w, const Sequential<T>& seq) {
  w.u32(static_cast<std::uint32_t>(seq.size()));
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const Layer<T>& l = seq.layer(i);
    w.u8(static_cast<std::uint8_t>(l.kind()));
    const auto hyper = l.hyper();
    w.u32(static_cast<std::uint32_t>(hyper.size()));
    for (int h : hyper) w.i32(h);
    const auto params = l.params();
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const Param<T>* p : params) {
      w.u32(static_cast<std::uint32_t>(p->value.rank()));
      for (int d : p->value.shape()) w.i32(d);
      for (T v : p->value.values()) w.f32(static_cast<float>(v));
    }
  }
}

template <typename T>
Sequential<T> read_sequential(ByteReader& r) {
  Sequential<T> seq;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t at = r.offset();
    const auto kind = static_cast<LayerKind>(r.u8());
    std::vector<int> hyper(r.u32());
    for (int& h : hyper) h = r.i32();
    std::unique_ptr<Layer<T>> layer;
    try {
      layer = make_layer<T>(kind, hyper);
    } catch (const ConfigError& e) {
      throw FormatError("invalid layer at byte offset " + std::to_string(at) + ": " + e.what());
    }
    auto params = layer->params();
    if (r.u32() != params.size()) {
      throw FormatError("parameter count mismatch at byte offset " + std::to_string(at));
    }
    for (Param<T>* p : params) {
      Shape shape(r.u32());
      for (int& d : shape) d = r.i32();
      if (shape != p->value.shape()) {
        throw FormatError("parameter shape mismatch at byte offset " + std::to_string(at));
      }
      for (T& v : p->value.values()) v = static_cast<T>(r.f32());
    }
    seq.add(std::move(layer));
  }
  return seq;
}

inline void write_matrix(ByteWriter& w, const Eigen::MatrixXd& m) {
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) w.f64(m(i, j));
  }
}

inline Eigen::MatrixXd read_matrix(ByteReader& r) {
  const std::uint32_t rows = r.u32(), cols = r.u32();
  if (std::uint64_t(rows) * cols * 8 > (std::uint64_t(1) << 32)) throw FormatError("matrix block too large");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
  }
  return m;
}

// Named blocks in file order. Lookups by name throw FormatError when absent.
struct ModelFile {
  std::string method;
  std::string config_text;
  std::vector<std::pair<std::string, Sequential<float>>> sequentials;
  std::vector<std::pair<std::string, Eigen::MatrixXd>> matrices;

  const Sequential<float>& sequential(const std::string& name) const {
    for (const auto& [n, s] : sequentials) {
      if (n == name) return s;
    }
    throw FormatError("model file has no block '" + name + "'");
  }
  const Eigen::MatrixXd& matrix(const std::string& name) const {
    for (const auto& [n, m] : matrices) {
      if (n == name) return m;
    }
    throw FormatError("model file has no block '" + name + "'");
  }
};

inline std::vector<std::uint8_t> encode_model_file(const ModelFile& f) {
  ByteWriter w;
  w.raw(kModelMagic, 4);
  w.u32(kModelVersion);
  w.str(f.method);
  w.str(f.config_text);
  w.u32(static_cast<std::uint32_t>(f.sequentials.size() + f.matrices.size()));
  for (const auto& [name, seq] : f.sequentials) {
    w.str(name);
    w.u8(static_cast<std::uint8_t>(BlockType::kSequential));
    write_sequential(w, seq);
  }
  for (const auto& [name, m] : f.matrices) {
    w.str(name);
    w.u8(static_cast<std::uint8_t>(BlockType::kMatrix));
    write_matrix(w, m);
  }
  const std::uint32_t crc = crc32_of(w.bytes().data(), w.bytes().size());
  w.u32(crc);
  return w.bytes();
}

inline ModelFile decode_model_file(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kModelMagic, 4) != 0) {
    throw FormatError("not a model file (bad magic)");
  }
  const std::size_t body = bytes.size() - 4;
  ByteReader tail(bytes.data() + body, 4);
  if (tail.u32() != crc32_of(bytes.data(), body)) throw ChecksumError("model file checksum mismatch");
  ByteReader r(bytes.data(), body);
  r.take(4);
  const std::uint32_t version = r.u32();
  if (version != kModelVersion) {
    throw VersionError("model file version " + std::to_string(version) + ", expected " +
                       std::to_string(kModelVersion));
  }
  ModelFile f;
  f.method = r.str();
  f.config_text = r.str();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    const auto type = static_cast<BlockType>(r.u8());
    if (type == BlockType::kSequential) {
      f.sequentials.emplace_back(std::move(name), read_sequential<float>(r));
    } else if (type == BlockType::kMatrix) {
      f.matrices.emplace_back(std::move(name), read_matrix(r));
    } else {
      throw FormatError("unknown block type at byte offset " + std::to_string(r.offset() - 1));
    }
  }
  if (!r.done()) throw FormatError("trailing bytes at offset " + std::to_string(r.offset()));
  return f;
}

inline void write_model_file(const ModelFile& f, const std::filesystem::path& path) {
  const auto bytes = encode_model_file(f);
  write_file_bytes(path, std::vector<unsigned char>(bytes.begin(), bytes.end()));
}

inline ModelFile read_model_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_model_file(std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
}

}  // namespace vdet
