#pragma once
// Binary checkpoint container: magic, version, an embedded config string, a
// named-tensor table, and an opaque RNG state blob. Feature dumps reuse the
// same container with metadata in the config slot.

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "evssl/bytes.hpp"
#include "evssl/common.hpp"
#include "evssl/model.hpp"
#include "evssl/tensor.hpp"

namespace evssl {

inline constexpr char kCheckpointMagic[4] = {'E', 'C', 'K', 'P'};
inline constexpr uint32_t kCheckpointVersion = 1;

enum class DType : uint8_t { F32 = 0, F64 = 1, I64 = 2, U64 = 3, U8 = 4 };

inline size_t dtype_size(DType t) {
  switch (t) {
    case DType::F32:
      return 4;
    case DType::F64:
      return 8;
    case DType::I64:
    case DType::U64:
      return 8;
    case DType::U8:
      return 1;
  }
  throw_data(cat("unknown dtype tag ", static_cast<int>(t)));
}

inline const char* dtype_name(DType t) {
  switch (t) {
    case DType::F32:
      return "f32";
    case DType::F64:
      return "f64";
    case DType::I64:
      return "i64";
    case DType::U64:
      return "u64";
    case DType::U8:
      return "u8";
  }
  return "?";
}

namespace detail {

template <typename S>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr DType value = DType::F32;
};
template <>
struct dtype_of<double> {
  static constexpr DType value = DType::F64;
};
template <>
struct dtype_of<int64_t> {
  static constexpr DType value = DType::I64;
};
template <>
struct dtype_of<uint64_t> {
  static constexpr DType value = DType::U64;
};
template <>
struct dtype_of<uint8_t> {
  static constexpr DType value = DType::U8;
};

}  // namespace detail

struct NamedTensor {
  std::string name;
  DType dtype = DType::F32;
  Shape dims;
  std::vector<uint8_t> data;  // raw little-endian values

  int64_t numel() const { return shape_numel(dims); }

  bool operator==(const NamedTensor&) const = default;
};

// Values are serialized element-wise through the little-endian writer, so
// files are identical across hosts regardless of native byte order.
template <typename S>
NamedTensor make_tensor(std::string name, Shape dims, std::span<const S> values) {
  require(!name.empty(), ErrorKind::Usage, "make_tensor: empty name");
  const int64_t n = shape_numel(dims);
  require(n == static_cast<int64_t>(values.size()), ErrorKind::Usage,
          cat("make_tensor: '", name, "' shape wants ", n, " values, got ",
              values.size()));
  ByteWriter w;
  for (const S v : values) {
    if constexpr (std::is_same_v<S, float>) {
      w.f32(v);
    } else if constexpr (std::is_same_v<S, double>) {
      w.f64(v);
    } else if constexpr (std::is_same_v<S, int64_t>) {
      w.u64(static_cast<uint64_t>(v));
    } else if constexpr (std::is_same_v<S, uint64_t>) {
      w.u64(v);
    } else {
      w.u8(v);
    }
  }
  NamedTensor t;
  t.name = std::move(name);
  t.dtype = detail::dtype_of<S>::value;
  t.dims = std::move(dims);
  t.data = w.data();
  return t;
}

template <typename S>
NamedTensor make_tensor(std::string name, Shape dims, const std::vector<S>& values) {
  return make_tensor(std::move(name), std::move(dims), std::span<const S>(values));
}

template <typename S>
std::vector<S> tensor_values(const NamedTensor& t) {
  require(t.dtype == detail::dtype_of<S>::value, ErrorKind::Usage,
          cat("tensor '", t.name, "' holds ", dtype_name(t.dtype), ", not ",
              dtype_name(detail::dtype_of<S>::value)));
  const int64_t n = t.numel();
  ByteReader r(t.data, cat("tensor '", t.name, "'"));
  std::vector<S> out(static_cast<size_t>(n));
  for (auto& v : out) {
    if constexpr (std::is_same_v<S, float>) {
      v = r.f32();
    } else if constexpr (std::is_same_v<S, double>) {
      v = r.f64();
    } else if constexpr (std::is_same_v<S, int64_t>) {
      v = static_cast<int64_t>(r.u64());
    } else if constexpr (std::is_same_v<S, uint64_t>) {
      v = r.u64();
    } else {
      v = r.u8();
    }
  }
  r.expect_end();
  return out;
}

struct Checkpoint {
  uint32_t version = kCheckpointVersion;
  std::string config_json;
  std::vector<NamedTensor> tensors;  // order preserved verbatim
  std::vector<uint8_t> rng_state;

  bool operator==(const Checkpoint&) const = default;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  const NamedTensor& at(const std::string& name) const {
    const NamedTensor* t = find(name);
    require(t != nullptr, ErrorKind::Data, cat("checkpoint has no tensor '", name, "'"));
    return *t;
  }

  void put(NamedTensor t) {
    for (auto& old : tensors) {
      if (old.name == t.name) {
        old = std::move(t);
        return;
      }
    }
    tensors.push_back(std::move(t));
  }
};

// The step counter rides along as a plain named tensor.
inline constexpr const char* kStepTensorName = "meta.step";

inline uint64_t checkpoint_step(const Checkpoint& ckpt) {
  const auto v = tensor_values<uint64_t>(ckpt.at(kStepTensorName));
  require(v.size() == 1, ErrorKind::Data, "meta.step must hold exactly one value");
  return v[0];
}

inline void set_checkpoint_step(Checkpoint& ckpt, uint64_t step) {
  ckpt.put(make_tensor<uint64_t>(kStepTensorName, {1}, std::vector<uint64_t>{step}));
}

inline std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(ckpt.version);
  w.u64(ckpt.config_json.size());
  w.bytes(ckpt.config_json.data(), ckpt.config_json.size());
  w.u32(static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    require(!t.name.empty(), ErrorKind::Usage, "encode_checkpoint: unnamed tensor");
    const int64_t n = t.numel();
    require(t.data.size() == static_cast<size_t>(n) * dtype_size(t.dtype),
            ErrorKind::Usage,
            cat("encode_checkpoint: tensor '", t.name, "' has ", t.data.size(),
                " data bytes for ", n, " x ", dtype_name(t.dtype)));
    w.str(t.name);
    w.u8(static_cast<uint8_t>(t.dtype));
    w.u8(static_cast<uint8_t>(t.dims.size()));
    for (const int64_t d : t.dims) w.u64(static_cast<uint64_t>(d));
    w.bytes(t.data.data(), t.data.size());
  }
  w.u64(ckpt.rng_state.size());
  w.bytes(ckpt.rng_state.data(), ckpt.rng_state.size());
  return w.data();
}

inline Checkpoint decode_checkpoint(std::span<const uint8_t> bytes,
                                    const std::string& what = "checkpoint") {
  ByteReader r(bytes.data(), bytes.size(), what);
  char magic[4];
  r.raw(magic, 4);
  require(std::memcmp(magic, kCheckpointMagic, 4) == 0, ErrorKind::Data,
          cat(what, ": bad magic, not a checkpoint file"));
  Checkpoint ckpt;
  ckpt.version = r.u32();
  require(ckpt.version == kCheckpointVersion, ErrorKind::Data,
          cat(what, ": unsupported version ", ckpt.version));
  const uint64_t cfg_len = r.u64();
  require(cfg_len <= r.remaining(), ErrorKind::Data,
          cat(what, ": config length ", cfg_len, " exceeds file size"));
  ckpt.config_json.resize(static_cast<size_t>(cfg_len));
  if (cfg_len > 0) r.raw(ckpt.config_json.data(), static_cast<size_t>(cfg_len));

  const uint32_t count = r.u32();
  std::unordered_set<std::string> seen;
  ckpt.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str();
    require(!t.name.empty(), ErrorKind::Data, cat(what, ": tensor ", i, " is unnamed"));
    require(seen.insert(t.name).second, ErrorKind::Data,
            cat(what, ": duplicate tensor name '", t.name, "'"));
    const uint8_t tag = r.u8();
    require(tag <= static_cast<uint8_t>(DType::U8), ErrorKind::Data,
            cat(what, ": tensor '", t.name, "' has unknown dtype tag ",
                static_cast<int>(tag)));
    t.dtype = static_cast<DType>(tag);
    const uint8_t rank = r.u8();
    t.dims.resize(rank);
    int64_t numel = 1;
    for (auto& d : t.dims) {
      const uint64_t raw = r.u64();
      require(raw >= 1 && raw <= (uint64_t{1} << 40), ErrorKind::Data,
              cat(what, ": tensor '", t.name, "' has invalid dim ", raw));
      d = static_cast<int64_t>(raw);
      numel *= d;
      require(numel <= (int64_t{1} << 40), ErrorKind::Data,
              cat(what, ": tensor '", t.name, "' is implausibly large"));
    }
    const size_t nbytes = static_cast<size_t>(numel) * dtype_size(t.dtype);
    require(nbytes <= r.remaining(), ErrorKind::Data,
            cat(what, ": tensor '", t.name, "' data overruns the file"));
    t.data.resize(nbytes);
    if (nbytes > 0) r.raw(t.data.data(), nbytes);
    ckpt.tensors.push_back(std::move(t));
  }

  const uint64_t rng_len = r.u64();
  require(rng_len <= r.remaining(), ErrorKind::Data,
          cat(what, ": RNG blob length ", rng_len, " exceeds file size"));
  ckpt.rng_state.resize(static_cast<size_t>(rng_len));
  if (rng_len > 0) r.raw(ckpt.rng_state.data(), static_cast<size_t>(rng_len));
  r.expect_end();
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_file_bytes(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file_bytes(path), cat("checkpoint '", path, "'"));
}

// ParamStore round trip. The prefix keeps student/teacher/optimizer tensors
// apart inside one file.
template <typename S>
void put_params(Checkpoint& ckpt, const std::string& prefix, const ParamStore<S>& store) {
  for (const auto& p : store.items)
    ckpt.put(make_tensor<S>(prefix + p.name, p.shape, std::span<const S>(p.value)));
}

template <typename S>
void read_params(const Checkpoint& ckpt, const std::string& prefix, ParamStore<S>& store) {
  for (auto& p : store.items) {
    const NamedTensor& t = ckpt.at(prefix + p.name);
    require(t.dims == p.shape, ErrorKind::Data,
            cat("checkpoint tensor '", t.name, "' shape mismatch"));
    p.value = tensor_values<S>(t);
  }
}

}  // namespace evssl
