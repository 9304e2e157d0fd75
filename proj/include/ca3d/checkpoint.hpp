// Binary checkpoints.
//
// Layout (all integers little-endian):
//   "CA3DCKPT"                         8-byte magic
//   u32 version
//   u32 length, bytes                  canonical config text
//   u8 mode kind, f64 scale T, u8 storage (0 full, 1 half)
//   u32 record count, then per record:
//     u32 name length, name bytes, u8 dtype (0 f32, 1 f16, 2 f64),
//     u32 rank, u64 dims[rank], little-endian payload
//   u32 CRC-32 of every preceding byte
// Records cover parameters followed by BatchNorm running statistics.
#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "ca3d/model.hpp"

namespace ca3d {

inline constexpr char kCheckpointMagic[8] = {'C', 'A', '3', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& b, std::size_t limit) : bytes_(b), limit_(limit) {}
  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  const unsigned char* take(std::size_t n) {
    need(n);
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > limit_) throw CheckpointError("checkpoint truncated");
  }
  const std::vector<unsigned char>& bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

template <class T>
void put_record(ByteWriter& w, const std::string& name, const Tensor<T>& t) {
  w.put_string(name);
  const std::uint8_t dtype = t.is_half() ? 1 : (sizeof(T) == 4 ? 0 : 2);
  w.put(dtype);
  w.put(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.put(static_cast<std::uint64_t>(d));
  for (T v : t.data()) {
    if (dtype == 1) {
      w.put(double_to_half_bits(static_cast<double>(v)));
    } else if (dtype == 0) {
      w.put(static_cast<float>(v));
    } else {
      w.put(static_cast<double>(v));
    }
  }
}

template <class T>
Tensor<T> get_record(ByteReader& r, std::string& name) {
  name = r.get_string();
  const auto dtype = r.get<std::uint8_t>();
  if (dtype > 2) throw CheckpointError("unknown dtype tag in record '" + name + "'");
  const auto rank = r.get<std::uint32_t>();
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
  Tensor<T> t(shape, dtype == 1 ? Storage::half : Storage::full);
  for (T& v : t.data()) {
    if (dtype == 1) {
      v = static_cast<T>(half_bits_to_double(r.get<std::uint16_t>()));
    } else if (dtype == 0) {
      v = static_cast<T>(r.get<float>());
    } else {
      v = static_cast<T>(r.get<double>());
    }
  }
  return t;
}

}  // namespace detail

template <class T>
std::vector<unsigned char> checkpoint_bytes(const Ca3dModel<T>& model) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.put(kCheckpointVersion);
  w.put_string(config_to_text(model.config()));
  w.put(static_cast<std::uint8_t>(model.mode().kind));
  w.put(model.mode().scale_t);
  w.put(static_cast<std::uint8_t>(model.storage() == Storage::half ? 1 : 0));
  const auto& norms = model.norm_states();
  w.put(static_cast<std::uint32_t>(model.parameters().size() + 2 * norms.size()));
  for (const Parameter<T>& p : model.parameters()) detail::put_record(w, p.name, p.value);
  for (const auto& [name, s] : norms) {
    detail::put_record(w, name + ".running_mean", s.running_mean);
    detail::put_record(w, name + ".running_var", s.running_var);
  }
  const std::uint32_t crc = detail::crc32_of(w.bytes().data(), w.bytes().size());
  w.put(crc);
  return std::move(w.bytes());
}

template <class T>
void checkpoint_save(const Ca3dModel<T>& model, const std::string& path) {
  const std::vector<unsigned char> bytes = checkpoint_bytes(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing '" + path + "'");
}

/// Restores a model. When `expected` is given, the stored config must match it.
template <class T>
Ca3dModel<T> checkpoint_load(const std::string& path, std::optional<NumericMode> mode = std::nullopt,
                             const ModelConfig* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kCheckpointMagic) + 8 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError("'" + path + "' is not a CA3D checkpoint");
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + body, 4);
  if (detail::crc32_of(bytes.data(), body) != stored_crc) throw CheckpointError("checkpoint checksum mismatch (corrupt file)");

  detail::ByteReader r(bytes, body);
  r.take(sizeof(kCheckpointMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const ModelConfig config = config_from_text(r.get_string());
  if (expected != nullptr && !(config == *expected)) {
    std::string why = "checkpoint config does not match the requested model";
    if (config.num_classes != expected->num_classes) {
      why += ": num_classes " + std::to_string(config.num_classes) + " vs expected " +
             std::to_string(expected->num_classes);
    }
    throw CheckpointError(why);
  }
  const auto kind = r.get<std::uint8_t>();
  if (kind > static_cast<std::uint8_t>(ModeKind::static_post_quant)) throw CheckpointError("bad mode tag");
  const auto scale_t = r.get<double>();
  const bool stored_half = r.get<std::uint8_t>() != 0;
  const NumericMode stored_mode{static_cast<ModeKind>(kind), scale_t};

  Ca3dModel<T> model(config, 0, mode.value_or(stored_mode));
  if (stored_half) model.set_storage(Storage::half);
  const auto count = r.get<std::uint32_t>();
  auto& params = model.parameters();
  auto& norms = model.norm_states();
  if (count != params.size() + 2 * norms.size()) throw CheckpointError("checkpoint record count mismatch");
  auto assign = [&](Tensor<T>& dst, const std::string& want) {
    std::string name;
    Tensor<T> t = detail::get_record<T>(r, name);
    if (name != want) throw CheckpointError("expected record '" + want + "', found '" + name + "'");
    if (t.shape() != dst.shape()) throw CheckpointError("shape mismatch for '" + name + "'");
    dst = t.to_storage(model.storage());
  };
  for (Parameter<T>& p : params) assign(p.value, p.name);
  for (auto& [name, s] : norms) {
    assign(s.running_mean, name + ".running_mean");
    assign(s.running_var, name + ".running_var");
  }
  if (r.pos() != body) throw CheckpointError("trailing bytes in checkpoint");
  return model;
}

}  // namespace ca3d
