#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "deltasync/common.hpp"

namespace deltasync::codec {

// Unsigned LEB128: 7 payload bits per byte, least significant group first,
// high bit set on every byte except the last.

constexpr std::size_t kMaxVarintBytes = 10;

inline std::size_t varint_size(std::uint64_t value) {
  std::size_t n = 1;
  while (value >= 0x80) {
    value >>= 7;
    ++n;
  }
  return n;
}

inline void varint_encode(std::uint64_t value, Bytes& out) {
  while (value >= 0x80) {
    out.push_back(static_cast<std::uint8_t>(value | 0x80));
    value >>= 7;
  }
  out.push_back(static_cast<std::uint8_t>(value));
}

inline Bytes varint_encode(std::uint64_t value) {
  Bytes out;
  varint_encode(value, out);
  return out;
}

struct VarintResult {
  std::uint64_t value;
  std::size_t cursor;  // one past the last consumed byte
};

// Rejects dangling continuation bits, non-minimal encodings and values wider than 64 bits.
inline VarintResult varint_decode(ByteSpan bytes, std::size_t cursor) {
  std::uint64_t value = 0;
  unsigned shift = 0;
  const std::size_t start = cursor;
  for (;;) {
    if (cursor >= bytes.size()) throw Error(ErrorCode::truncated, "varint runs past end of buffer");
    const std::uint8_t byte = bytes[cursor++];
    const std::uint64_t payload = byte & 0x7F;
    if (shift == 63 && payload > 1) throw Error(ErrorCode::overflow, "varint exceeds 64 bits");
    value |= payload << shift;
    if ((byte & 0x80) == 0) {
      if (byte == 0 && cursor - start > 1) throw Error(ErrorCode::overlong, "non-minimal varint");
      return {value, cursor};
    }
    shift += 7;
    if (shift > 63) throw Error(ErrorCode::overflow, "varint exceeds 64 bits");
  }
}

// First index as-is, then the positive gap to each following index.
inline Bytes encode_indices(std::span<const std::uint64_t> indices) {
  Bytes out;
  out.reserve(indices.size() * 2);
  std::uint64_t prev = 0;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (i == 0) {
      varint_encode(indices[0], out);
    } else {
      if (indices[i] <= prev) throw Error(ErrorCode::not_increasing, "indices must be strictly increasing");
      varint_encode(indices[i] - prev, out);
    }
    prev = indices[i];
  }
  return out;
}

// Streaming decoder over an index stream; yields absolute indices.
class IndexDecoder {
 public:
  IndexDecoder(ByteSpan stream, std::uint64_t element_count) : stream_(stream), limit_(element_count) {}

  bool done() const { return cursor_ >= stream_.size(); }

  std::uint64_t next() {
    auto [v, cur] = varint_decode(stream_, cursor_);
    cursor_ = cur;
    std::uint64_t index;
    if (first_) {
      index = v;
      first_ = false;
    } else {
      if (v == 0) throw Error(ErrorCode::not_increasing, "zero gap in index stream");
      if (v > UINT64_MAX - prev_) throw Error(ErrorCode::overflow, "index overflows 64 bits");
      index = prev_ + v;
    }
    if (index >= limit_) throw Error(ErrorCode::index_out_of_range, "index beyond element count");
    prev_ = index;
    return index;
  }

 private:
  ByteSpan stream_;
  std::uint64_t limit_;
  std::size_t cursor_ = 0;
  std::uint64_t prev_ = 0;
  bool first_ = true;
};

// Decodes exactly `count` indices and requires the stream to be fully consumed.
inline std::vector<std::uint64_t> decode_indices(ByteSpan stream, std::uint64_t count,
                                                 std::uint64_t element_count) {
  std::vector<std::uint64_t> out;
  out.reserve(count);
  IndexDecoder dec(stream, element_count);
  while (!dec.done()) {
    if (out.size() == count) throw Error(ErrorCode::malformed, "index stream longer than nnz");
    out.push_back(dec.next());
  }
  if (out.size() != count) throw Error(ErrorCode::malformed, "index stream shorter than nnz");
  return out;
}

}  // namespace deltasync::codec
