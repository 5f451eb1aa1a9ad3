#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "deltasync/codec/parameter_set.hpp"
#include "deltasync/codec/varint.hpp"
#include "deltasync/common.hpp"
#include "deltasync/sha256.hpp"

namespace deltasync::codec {

// Container layout (little-endian), documented in docs/FORMATS.md:
//   header: "SPDC" | format_version u16 | version u64 | base_version u64 |
//           element type u8 | tensor count u32 | body length u64 | SHA-256(body)
//   body, per tensor: name len u16 | name | element_count u64 | nnz u64 |
//           index_stream len u64 | index_stream | values (nnz * width) | mode u8
constexpr std::uint16_t kFormatVersion = 1;
constexpr std::size_t kCheckpointHeaderSize = 4 + 2 + 8 + 8 + 1 + 4 + 8 + 32;
// Genesis snapshots have no base; version == base_version + 1 holds modulo 2^64.
constexpr std::uint64_t kNoBaseVersion = std::numeric_limits<std::uint64_t>::max();

enum class DeltaMode : std::uint8_t { replace = 0, additive = 1 };

inline const char* to_string(DeltaMode m) { return m == DeltaMode::replace ? "replace" : "additive"; }

// One flattened tensor's updates. A dense payload (every position, in order) is
// written with an empty index stream and nnz == element_count.
struct TensorDelta {
  std::string name;
  std::uint64_t element_count = 0;
  std::uint64_t nnz = 0;
  Bytes index_stream;
  Bytes values;
  DeltaMode mode = DeltaMode::replace;

  bool dense() const { return nnz > 0 && nnz == element_count && index_stream.empty(); }
  std::size_t encoded_size() const { return 2 + name.size() + 8 + 8 + 8 + index_stream.size() + values.size() + 1; }

  friend bool operator==(const TensorDelta&, const TensorDelta&) = default;
};

struct TensorDeltaView {
  std::string_view name;
  std::uint64_t element_count = 0;
  std::uint64_t nnz = 0;
  ByteSpan index_stream;
  ByteSpan values;
  DeltaMode mode = DeltaMode::replace;

  bool dense() const { return nnz > 0 && nnz == element_count && index_stream.empty(); }
};

struct CheckpointHeader {
  std::uint16_t format_version = kFormatVersion;
  std::uint64_t version = 0;
  std::uint64_t base_version = 0;
  ElementType element_type = ElementType::f16;
  std::uint32_t tensor_count = 0;
  std::uint64_t body_length = 0;
  Digest body_hash{};
};

inline void write_header(const CheckpointHeader& h, std::uint8_t* out) {
  Bytes tmp;
  ByteWriter w(tmp);
  w.raw(std::string_view("SPDC"));
  w.u16(h.format_version);
  w.u64(h.version);
  w.u64(h.base_version);
  w.u8(static_cast<std::uint8_t>(h.element_type));
  w.u32(h.tensor_count);
  w.u64(h.body_length);
  w.digest(h.body_hash);
  std::memcpy(out, tmp.data(), kCheckpointHeaderSize);
}

inline CheckpointHeader parse_header(ByteSpan bytes) {
  ByteReader r(bytes);
  auto magic = r.raw(4);
  if (std::memcmp(magic.data(), "SPDC", 4) != 0) throw Error(ErrorCode::bad_magic, "not a delta checkpoint");
  CheckpointHeader h;
  h.format_version = r.u16();
  if (h.format_version != kFormatVersion)
    throw Error(ErrorCode::unsupported_format_version, "format version " + std::to_string(h.format_version));
  h.version = r.u64();
  h.base_version = r.u64();
  h.element_type = element_type_from_code(r.u8());
  h.tensor_count = r.u32();
  h.body_length = r.u64();
  h.body_hash = r.digest();
  return h;
}

inline void encode_tensor(const TensorDelta& t, Bytes& out) {
  ByteWriter w(out);
  w.str16(t.name);
  w.u64(t.element_count);
  w.u64(t.nnz);
  w.u64(t.index_stream.size());
  w.raw(t.index_stream);
  w.raw(t.values);
  w.u8(static_cast<std::uint8_t>(t.mode));
}

// Checks a tensor's internal consistency: value length, index count, ordering, bounds.
inline void validate_tensor(const TensorDeltaView& t, std::size_t width) {
  if (t.values.size() != t.nnz * width) throw Error(ErrorCode::malformed, "value bytes do not match nnz");
  if (t.nnz > t.element_count) throw Error(ErrorCode::malformed, "nnz exceeds element count");
  if (t.index_stream.empty()) {
    if (t.nnz != 0 && t.nnz != t.element_count) throw Error(ErrorCode::malformed, "missing index stream");
    return;
  }
  IndexDecoder dec(t.index_stream, t.element_count);
  std::uint64_t n = 0;
  while (!dec.done()) {
    dec.next();
    if (++n > t.nnz) throw Error(ErrorCode::malformed, "index stream longer than nnz");
  }
  if (n != t.nnz) throw Error(ErrorCode::malformed, "index stream shorter than nnz");
}

inline TensorDeltaView view_of(const TensorDelta& t) {
  return {t.name, t.element_count, t.nnz, t.index_stream, t.values, t.mode};
}

// Serializes tensors one at a time, hashing the body incrementally. Body bytes
// go to `sink` as they are produced; the header is available only at finish().
class CheckpointWriter {
 public:
  using Sink = std::function<void(ByteSpan)>;

  CheckpointWriter(std::uint64_t version, std::uint64_t base_version, ElementType type, std::uint32_t tensor_count,
                   Sink sink)
      : sink_(std::move(sink)) {
    header_.version = version;
    header_.base_version = base_version;
    header_.element_type = type;
    header_.tensor_count = tensor_count;
  }

  void add(const TensorDelta& t) {
    if (added_ == header_.tensor_count) throw Error(ErrorCode::invalid_argument, "more tensors than declared");
    validate_tensor(view_of(t), element_width(header_.element_type));
    scratch_.clear();
    ByteWriter w(scratch_);
    w.str16(t.name);
    w.u64(t.element_count);
    w.u64(t.nnz);
    w.u64(t.index_stream.size());
    emit(scratch_);
    emit(t.index_stream);
    emit(t.values);
    const std::uint8_t mode = static_cast<std::uint8_t>(t.mode);
    emit(ByteSpan(&mode, 1));
    ++added_;
  }

  CheckpointHeader finish() {
    if (added_ != header_.tensor_count) throw Error(ErrorCode::invalid_argument, "fewer tensors than declared");
    header_.body_hash = hash_.finish();
    return header_;
  }

 private:
  void emit(ByteSpan bytes) {
    if (bytes.empty()) return;
    hash_.update(bytes);
    header_.body_length += bytes.size();
    sink_(bytes);
  }

  Sink sink_;
  CheckpointHeader header_;
  Sha256 hash_;
  Bytes scratch_;
  std::uint32_t added_ = 0;
};

// Parsed, non-owning view over a serialized checkpoint.
struct CheckpointView {
  CheckpointHeader header;
  std::vector<TensorDeltaView> tensors;
  ByteSpan body;
};

struct ParseOptions {
  bool verify_hash = true;
  bool validate_indices = true;
};

inline CheckpointView parse_checkpoint(ByteSpan bytes, ParseOptions opts = {}) {
  if (bytes.size() < kCheckpointHeaderSize) throw Error(ErrorCode::truncated, "checkpoint shorter than header");
  CheckpointView view;
  view.header = parse_header(bytes.first(kCheckpointHeaderSize));
  if (bytes.size() - kCheckpointHeaderSize != view.header.body_length)
    throw Error(ErrorCode::malformed, "body length does not match header");
  view.body = bytes.subspan(kCheckpointHeaderSize);
  if (opts.verify_hash && sha256(view.body) != view.header.body_hash)
    throw Error(ErrorCode::hash_mismatch, "body hash does not match header");
  const auto width = element_width(view.header.element_type);
  ByteReader r(view.body);
  view.tensors.reserve(view.header.tensor_count);
  for (std::uint32_t i = 0; i < view.header.tensor_count; ++i) {
    TensorDeltaView t;
    const auto name_len = r.u16();
    auto name = r.raw(name_len);
    t.name = std::string_view(reinterpret_cast<const char*>(name.data()), name.size());
    t.element_count = r.u64();
    t.nnz = r.u64();
    const auto idx_len = r.u64();
    if (idx_len > r.remaining()) throw Error(ErrorCode::truncated, "index stream past end of body");
    t.index_stream = r.raw(idx_len);
    if (t.nnz > r.remaining() / width) throw Error(ErrorCode::truncated, "values past end of body");
    t.values = r.raw(t.nnz * width);
    const auto mode = r.u8();
    if (mode > 1) throw Error(ErrorCode::malformed, "unknown delta mode");
    t.mode = static_cast<DeltaMode>(mode);
    if (opts.validate_indices) validate_tensor(t, width);
    view.tensors.push_back(t);
  }
  if (!r.done()) throw Error(ErrorCode::malformed, "trailing bytes in body");
  return view;
}

// Versioned, immutable delta artifact. Construct with seal() so body_hash is consistent.
struct DeltaCheckpoint {
  std::uint16_t format_version = kFormatVersion;
  std::uint64_t version = 0;
  std::uint64_t base_version = 0;
  ElementType element_type = ElementType::f16;
  std::vector<TensorDelta> tensors;
  Digest body_hash{};

  static DeltaCheckpoint seal(std::uint64_t version, std::uint64_t base_version, ElementType type,
                              std::vector<TensorDelta> tensors) {
    DeltaCheckpoint c;
    c.version = version;
    c.base_version = base_version;
    c.element_type = type;
    c.tensors = std::move(tensors);
    c.body_hash = c.compute_body_hash();
    return c;
  }

  Digest compute_body_hash() const {
    CheckpointWriter w(version, base_version, element_type, static_cast<std::uint32_t>(tensors.size()),
                       [](ByteSpan) {});
    for (const auto& t : tensors) w.add(t);
    return w.finish().body_hash;
  }

  CheckpointHeader header() const {
    CheckpointHeader h;
    h.format_version = format_version;
    h.version = version;
    h.base_version = base_version;
    h.element_type = element_type;
    h.tensor_count = static_cast<std::uint32_t>(tensors.size());
    for (const auto& t : tensors) h.body_length += t.encoded_size();
    h.body_hash = body_hash;
    return h;
  }

  Bytes serialize() const {
    Bytes out(kCheckpointHeaderSize);
    std::uint64_t body = 0;
    for (const auto& t : tensors) body += t.encoded_size();
    out.reserve(kCheckpointHeaderSize + body);
    CheckpointWriter w(version, base_version, element_type, static_cast<std::uint32_t>(tensors.size()),
                       [&out](ByteSpan b) { out.insert(out.end(), b.begin(), b.end()); });
    for (const auto& t : tensors) w.add(t);
    auto h = w.finish();
    h.format_version = format_version;
    if (h.body_hash != body_hash) throw Error(ErrorCode::hash_mismatch, "checkpoint mutated after sealing");
    write_header(h, out.data());
    return out;
  }

  static DeltaCheckpoint deserialize(ByteSpan bytes) {
    auto view = parse_checkpoint(bytes);
    DeltaCheckpoint c;
    c.format_version = view.header.format_version;
    c.version = view.header.version;
    c.base_version = view.header.base_version;
    c.element_type = view.header.element_type;
    c.body_hash = view.header.body_hash;
    c.tensors.reserve(view.tensors.size());
    for (const auto& t : view.tensors) {
      c.tensors.push_back(TensorDelta{std::string(t.name), t.element_count, t.nnz,
                                      Bytes(t.index_stream.begin(), t.index_stream.end()),
                                      Bytes(t.values.begin(), t.values.end()), t.mode});
    }
    return c;
  }

  std::uint64_t total_nnz() const {
    std::uint64_t n = 0;
    for (const auto& t : tensors) n += t.nnz;
    return n;
  }

  friend bool operator==(const DeltaCheckpoint&, const DeltaCheckpoint&) = default;
};

}  // namespace deltasync::codec
