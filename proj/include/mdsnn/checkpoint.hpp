#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <boost/crc.hpp>

#include "mdsnn/error.hpp"
#include "mdsnn/network.hpp"
#include "mdsnn/tensor.hpp"

// Binary checkpoint layout, all integers little-endian:
//
//   "MDSNNCKP"  u32 version  u32 record_count
//   record := u32 name_len  name  u8 kind  body  u32 crc32(name..body)
//   tensor body := u32 rank  u64 dims[rank]  u8 width(4|8)  u64 nbytes  payload
//   text body   := u64 nbytes  utf8
namespace mdsnn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

inline constexpr std::array<char, 8> kCheckpointMagic{'M', 'D', 'S', 'N',
                                                      'N', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  enum class Kind { kIo, kBadMagic, kVersionMismatch, kCorruptedRecord, kArchitectureMismatch };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::uint8_t width = 8;      // bytes per element
  std::vector<double> values;  // f32 payloads are widened exactly
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string architecture;
  std::vector<CheckpointTensor> tensors;
  std::map<std::string, std::string> meta;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
};

namespace detail {

enum : std::uint8_t { kRecordTensor = 1, kRecordText = 2 };

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof v);
}

inline void put_bytes(std::vector<std::uint8_t>& out, const std::string& s) {
  out.insert(out.end(), s.begin(), s.end());
}

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  template <typename T>
  T get(const std::string& record) {
    need(sizeof(T), record);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n, const std::string& record) {
    need(n, record);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::span<const std::uint8_t> span(std::size_t from, std::size_t to) const {
    return bytes_.subspan(from, to - from);
  }

 private:
  void need(std::size_t n, const std::string& record) const {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::kCorruptedRecord,
                            "checkpoint truncated inside record '" + record + "'");
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline void encode_record(std::vector<std::uint8_t>& out, const std::string& name,
                          std::uint8_t kind, const std::vector<std::uint8_t>& body) {
  const std::size_t start = out.size();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  put_bytes(out, name);
  put<std::uint8_t>(out, kind);
  out.insert(out.end(), body.begin(), body.end());
  const std::uint32_t crc =
      crc32(std::span<const std::uint8_t>(out).subspan(start, out.size() - start));
  put<std::uint32_t>(out, crc);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put<std::uint32_t>(out, ck.version);
  detail::put<std::uint32_t>(
      out, static_cast<std::uint32_t>(1 + ck.meta.size() + ck.tensors.size()));

  auto text = [&out](const std::string& name, const std::string& value) {
    std::vector<std::uint8_t> body;
    detail::put<std::uint64_t>(body, value.size());
    detail::put_bytes(body, value);
    detail::encode_record(out, name, detail::kRecordText, body);
  };
  text("arch", ck.architecture);
  for (const auto& [k, v] : ck.meta) text("meta." + k, v);

  for (const auto& t : ck.tensors) {
    if (t.width != 4 && t.width != 8) {
      throw UsageError("checkpoint tensor '" + t.name + "' has element width " +
                       std::to_string(t.width));
    }
    if (numel(t.shape) != t.values.size()) {
      throw ShapeError("checkpoint tensor '" + t.name + "' shape/value mismatch");
    }
    std::vector<std::uint8_t> body;
    detail::put<std::uint32_t>(body, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::put<std::uint64_t>(body, d);
    detail::put<std::uint8_t>(body, t.width);
    detail::put<std::uint64_t>(body, t.values.size() * t.width);
    for (double v : t.values) {
      if (t.width == 8) {
        detail::put<double>(body, v);
      } else {
        detail::put<float>(body, static_cast<float>(v));
      }
    }
    detail::encode_record(out, t.name, detail::kRecordTensor, body);
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  using K = CheckpointError::Kind;
  if (bytes.size() < kCheckpointMagic.size() ||
      !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    throw CheckpointError(K::kBadMagic, "not a checkpoint (bad magic)");
  }
  detail::Reader r(bytes.subspan(kCheckpointMagic.size()));
  Checkpoint ck;
  ck.version = r.get<std::uint32_t>("header");
  if (ck.version != kCheckpointVersion) {
    throw CheckpointError(K::kVersionMismatch,
                          "checkpoint version " + std::to_string(ck.version) +
                              ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto count = r.get<std::uint32_t>("header");
  bool have_arch = false;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "#" + std::to_string(i);
    const std::size_t start = r.pos();
    const auto name_len = r.get<std::uint32_t>(where);
    auto name_bytes = r.take(name_len, where);
    const std::string name(name_bytes.begin(), name_bytes.end());
    const auto kind = r.get<std::uint8_t>(name);
    CheckpointTensor tensor;
    std::string text;
    if (kind == detail::kRecordText) {
      const auto n = r.get<std::uint64_t>(name);
      auto s = r.take(n, name);
      text.assign(s.begin(), s.end());
    } else if (kind == detail::kRecordTensor) {
      tensor.name = name;
      const auto rank = r.get<std::uint32_t>(name);
      for (std::uint32_t d = 0; d < rank; ++d) tensor.shape.push_back(r.get<std::uint64_t>(name));
      tensor.width = r.get<std::uint8_t>(name);
      const auto nbytes = r.get<std::uint64_t>(name);
      if ((tensor.width != 4 && tensor.width != 8) ||
          nbytes != numel(tensor.shape) * tensor.width) {
        throw CheckpointError(K::kCorruptedRecord,
                              "checkpoint record '" + name + "' has an inconsistent header");
      }
      auto payload = r.take(nbytes, name);
      tensor.values.resize(nbytes / tensor.width);
      for (std::size_t k = 0; k < tensor.values.size(); ++k) {
        if (tensor.width == 8) {
          std::memcpy(&tensor.values[k], payload.data() + k * 8, 8);
        } else {
          float f;
          std::memcpy(&f, payload.data() + k * 4, 4);
          tensor.values[k] = f;
        }
      }
    } else {
      throw CheckpointError(K::kCorruptedRecord,
                            "checkpoint record '" + name + "' has unknown kind");
    }
    const std::size_t end = r.pos();
    const auto stored = r.get<std::uint32_t>(name);
    if (stored != detail::crc32(r.span(start, end))) {
      throw CheckpointError(K::kCorruptedRecord,
                            "checkpoint record '" + name + "' failed its CRC check");
    }
    if (kind == detail::kRecordTensor) {
      ck.tensors.push_back(std::move(tensor));
    } else if (name == "arch") {
      ck.architecture = std::move(text);
      have_arch = true;
    } else if (name.rfind("meta.", 0) == 0) {
      ck.meta[name.substr(5)] = std::move(text);
    }
  }
  if (!have_arch) throw CheckpointError(K::kCorruptedRecord, "checkpoint has no 'arch' record");
  if (r.remaining() != 0) {
    throw CheckpointError(K::kCorruptedRecord, "checkpoint has trailing bytes");
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::kIo, "cannot open " + path);
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                        std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

// Parameters then running statistics ("<bn>.running_mean", ".running_var").
template <typename Real>
Checkpoint to_checkpoint(const ResidualNet<Real>& net,
                         std::map<std::string, std::string> meta = {}) {
  Checkpoint ck;
  ck.architecture = net.config().describe();
  ck.meta = std::move(meta);
  auto add = [&ck](const std::string& name, const Tensor<Real>& t) {
    CheckpointTensor c{name, t.shape(), static_cast<std::uint8_t>(sizeof(Real)), {}};
    c.values.assign(t.data().begin(), t.data().end());
    ck.tensors.push_back(std::move(c));
  };
  for (const auto& p : net.params()) add(p.name, p.value);
  for (std::size_t i = 0; i < net.bn_stats().size(); ++i) {
    add(net.bn_names()[i] + ".running_mean", net.bn_stats()[i].mean);
    add(net.bn_names()[i] + ".running_var", net.bn_stats()[i].var);
  }
  return ck;
}

template <typename Real>
void restore(ResidualNet<Real>& net, const Checkpoint& ck) {
  using K = CheckpointError::Kind;
  const std::string arch = net.config().describe();
  if (ck.architecture != arch) {
    throw CheckpointError(K::kArchitectureMismatch,
                          "checkpoint architecture '" + ck.architecture +
                              "' does not match network '" + arch + "'");
  }
  auto load = [&ck](const std::string& name, Tensor<Real>& dst) {
    const CheckpointTensor* t = ck.find(name);
    if (!t) throw CheckpointError(K::kArchitectureMismatch, "checkpoint lacks '" + name + "'");
    if (t->shape != dst.shape()) {
      throw CheckpointError(K::kArchitectureMismatch,
                            "checkpoint tensor '" + name + "' has shape " +
                                to_string(t->shape) + ", network expects " +
                                to_string(dst.shape()));
    }
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(t->values[i]);
  };
  for (auto& p : net.params()) load(p.name, p.value);
  for (std::size_t i = 0; i < net.bn_stats().size(); ++i) {
    load(net.bn_names()[i] + ".running_mean", net.bn_stats()[i].mean);
    load(net.bn_names()[i] + ".running_var", net.bn_stats()[i].var);
  }
}

}  // namespace mdsnn
