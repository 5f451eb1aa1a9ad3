#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "deltasync/common.hpp"
#include "deltasync/sha256.hpp"

namespace deltasync::codec {

// Scalars are carried as opaque fixed-width lanes; only additive mode interprets them.
enum class ElementType : std::uint8_t { f16 = 0, f32 = 1 };

inline std::size_t element_width(ElementType t) { return t == ElementType::f16 ? 2 : 4; }

inline ElementType element_type_from_code(std::uint8_t code) {
  if (code > 1) throw Error(ErrorCode::malformed, "unknown element type code");
  return static_cast<ElementType>(code);
}

inline const char* to_string(ElementType t) { return t == ElementType::f16 ? "f16" : "f32"; }

struct Tensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  Bytes data;  // element_count * width bytes

  std::uint64_t element_count() const {
    return std::accumulate(shape.begin(), shape.end(), std::uint64_t{1}, std::multiplies<>());
  }
};

class ParameterSet {
 public:
  ParameterSet() = default;
  explicit ParameterSet(ElementType type) : type_(type) {}

  ElementType element_type() const { return type_; }
  std::size_t width() const { return element_width(type_); }

  Tensor& add(std::string name, std::vector<std::uint64_t> shape, Bytes data) {
    if (index_.count(name)) throw Error(ErrorCode::name_mismatch, "duplicate tensor name " + name);
    for (auto e : shape)
      if (e == 0) throw Error(ErrorCode::shape_mismatch, "zero extent in " + name);
    Tensor t{std::move(name), std::move(shape), std::move(data)};
    if (t.data.size() != t.element_count() * width())
      throw Error(ErrorCode::shape_mismatch, "data length does not match shape for " + t.name);
    index_.emplace(t.name, tensors_.size());
    tensors_.push_back(std::move(t));
    return tensors_.back();
  }

  // Zero-filled tensor.
  Tensor& add_zeros(std::string name, std::vector<std::uint64_t> shape) {
    std::uint64_t n = std::accumulate(shape.begin(), shape.end(), std::uint64_t{1}, std::multiplies<>());
    return add(std::move(name), std::move(shape), Bytes(n * width(), 0));
  }

  const Tensor* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &tensors_[it->second];
  }
  Tensor* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &tensors_[it->second];
  }

  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  std::size_t size() const { return tensors_.size(); }

  std::uint64_t total_elements() const {
    std::uint64_t n = 0;
    for (const auto& t : tensors_) n += t.element_count();
    return n;
  }

  // Digest over names, shapes and raw data in tensor order.
  Digest state_digest() const {
    Sha256 h;
    Bytes meta;
    ByteWriter w(meta);
    w.u8(static_cast<std::uint8_t>(type_));
    w.u32(static_cast<std::uint32_t>(tensors_.size()));
    h.update(meta);
    for (const auto& t : tensors_) {
      meta.clear();
      w.str16(t.name);
      w.u8(static_cast<std::uint8_t>(t.shape.size()));
      for (auto e : t.shape) w.u64(e);
      h.update(meta);
      h.update(t.data);
    }
    return h.finish();
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.type_ != b.type_ || a.tensors_.size() != b.tensors_.size()) return false;
    for (std::size_t i = 0; i < a.tensors_.size(); ++i) {
      const auto& x = a.tensors_[i];
      const auto& y = b.tensors_[i];
      if (x.name != y.name || x.shape != y.shape || x.data != y.data) return false;
    }
    return true;
  }

 private:
  ElementType type_ = ElementType::f16;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Requires identical names (in order), shapes and element types.
inline void require_same_structure(const ParameterSet& a, const ParameterSet& b) {
  if (a.element_type() != b.element_type())
    throw Error(ErrorCode::element_type_mismatch, "element types differ");
  if (a.size() != b.size()) throw Error(ErrorCode::name_mismatch, "tensor counts differ");
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.tensors()[i];
    const auto& y = b.tensors()[i];
    if (x.name != y.name) throw Error(ErrorCode::name_mismatch, x.name + " vs " + y.name);
    if (x.shape != y.shape) throw Error(ErrorCode::shape_mismatch, "shape differs for " + x.name);
  }
}

// IEEE half <-> single, round-to-nearest-even. Used only by additive mode.
inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000) << 16;
  std::uint32_t exp = (h >> 10) & 0x1F;
  std::uint32_t mant = h & 0x3FF;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3FF;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
  }
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline std::uint16_t float_to_half(float f) {
  std::uint32_t x;
  std::memcpy(&x, &f, 4);
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000);
  const std::uint32_t abs = x & 0x7FFFFFFFu;
  if (abs >= 0x7F800000u) return sign | 0x7C00 | (abs > 0x7F800000u ? 0x200 : 0);  // inf / nan
  if (abs >= 0x477FF000u) return sign | 0x7C00;                                     // overflow
  if (abs < 0x38800000u) {                                                          // subnormal / zero
    if (abs < 0x33000000u) return sign;
    const std::uint32_t shift = 113 - (abs >> 23);
    std::uint32_t mant = (abs & 0x7FFFFF) | 0x800000;
    std::uint32_t half = mant >> (shift + 13);
    const std::uint32_t rem = mant & ((1u << (shift + 13)) - 1);
    const std::uint32_t mid = 1u << (shift + 12);
    if (rem > mid || (rem == mid && (half & 1))) ++half;
    return sign | static_cast<std::uint16_t>(half);
  }
  std::uint32_t half = ((abs >> 23) - 112) << 10 | ((abs >> 13) & 0x3FF);
  const std::uint32_t rem = abs & 0x1FFF;
  if (rem > 0x1000 || (rem == 0x1000 && (half & 1))) ++half;
  return sign | static_cast<std::uint16_t>(half);
}

// Simple container for whole parameter sets on disk ("SPPS"); see docs/FORMATS.md.
inline Bytes serialize_parameter_set(const ParameterSet& ps) {
  Bytes out;
  ByteWriter w(out);
  w.raw(std::string_view("SPPS"));
  w.u8(static_cast<std::uint8_t>(ps.element_type()));
  w.u32(static_cast<std::uint32_t>(ps.size()));
  for (const auto& t : ps.tensors()) {
    w.str16(t.name);
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (auto e : t.shape) w.u64(e);
    w.u64(t.data.size());
    w.raw(t.data);
  }
  return out;
}

inline ParameterSet parse_parameter_set(ByteSpan bytes) {
  ByteReader r(bytes);
  auto magic = r.raw(4);
  if (std::memcmp(magic.data(), "SPPS", 4) != 0) throw Error(ErrorCode::bad_magic, "not a parameter set file");
  ParameterSet ps(element_type_from_code(r.u8()));
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.str16();
    std::vector<std::uint64_t> shape(r.u8());
    for (auto& e : shape) e = r.u64();
    auto len = r.u64();
    auto data = r.raw(len);
    ps.add(std::move(name), std::move(shape), Bytes(data.begin(), data.end()));
  }
  if (!r.done()) throw Error(ErrorCode::malformed, "trailing bytes after parameter set");
  return ps;
}

inline Bytes read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::not_found, "cannot open " + path);
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  Bytes out(size);
  if (size && !in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size)))
    throw Error(ErrorCode::storage_failure, "short read on " + path);
  return out;
}

inline void write_file(const std::string& path, ByteSpan bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::storage_failure, "cannot create " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::storage_failure, "short write on " + path);
}

}  // namespace deltasync::codec
