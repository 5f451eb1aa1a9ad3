#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <memory>
#include <vector>

#include "deltasync/common.hpp"
#include "deltasync/crc32c.hpp"

namespace deltasync::transport {

// 36-byte frame header: "SPSG" | version u64 | segment_id u32 | total_segments u32 | byte_offset u64 | length u32 | crc32c u32
constexpr std::size_t kSegmentHeaderSize = 4 + 8 + 4 + 4 + 8 + 4 + 4;
constexpr std::uint32_t kUnknownTotal = 0xFFFFFFFFu;
constexpr std::size_t kMinSegmentSize = 1024;
constexpr std::size_t kDefaultSegmentSize = 4u << 20;
constexpr std::size_t kDefaultStreams = 4;

struct SegmentHeader {
  std::uint64_t version = 0;
  std::uint32_t segment_id = 0;
  std::uint32_t total_segments = kUnknownTotal;
  std::uint64_t byte_offset = 0;
  std::uint32_t length = 0;
  std::uint32_t crc = 0;

  // Zero-length segment closing a cut-through emission: id == total == data segment count.
  bool terminal() const { return length == 0 && total_segments != kUnknownTotal && segment_id == total_segments; }
};

// Payload bytes are shared, so a segment can be queued on many sessions without copying.
struct Segment {
  SegmentHeader header;
  std::shared_ptr<const Bytes> storage;
  std::size_t storage_offset = 0;

  ByteSpan payload() const {
    if (!storage) return {};
    return ByteSpan(storage->data() + storage_offset, header.length);
  }
  std::size_t frame_size() const { return kSegmentHeaderSize + header.length; }
};

inline void encode_segment_header(const SegmentHeader& h, std::uint8_t* out) {
  std::memcpy(out, "SPSG", 4);
  store_le64(out + 4, h.version);
  store_le32(out + 12, h.segment_id);
  store_le32(out + 16, h.total_segments);
  store_le64(out + 20, h.byte_offset);
  store_le32(out + 28, h.length);
  store_le32(out + 32, h.crc);
}

inline SegmentHeader decode_segment_header(const std::uint8_t* in) {
  if (std::memcmp(in, "SPSG", 4) != 0) throw Error(ErrorCode::bad_magic, "not a segment frame");
  SegmentHeader h;
  h.version = load_le64(in + 4);
  h.segment_id = load_le32(in + 12);
  h.total_segments = load_le32(in + 16);
  h.byte_offset = load_le64(in + 20);
  h.length = load_le32(in + 28);
  h.crc = load_le32(in + 32);
  return h;
}

inline Segment make_segment(std::uint64_t version, std::uint32_t id, std::uint32_t total, std::uint64_t offset,
                            std::shared_ptr<const Bytes> storage, std::size_t storage_offset, std::uint32_t length) {
  Segment s;
  s.header = SegmentHeader{version, id, total, offset, length, 0};
  s.storage = std::move(storage);
  s.storage_offset = storage_offset;
  s.header.crc = crc32c(s.payload());
  return s;
}

// ceil(len / size) segments with dense ids; empty input yields one zero-length segment.
inline std::vector<Segment> segmentize(std::uint64_t version, std::shared_ptr<const Bytes> bytes,
                                       std::size_t segment_size = kDefaultSegmentSize) {
  if (segment_size < kMinSegmentSize) throw Error(ErrorCode::invalid_argument, "segment size below 1 KiB");
  if (segment_size > 0xFFFFFFFFu) throw Error(ErrorCode::invalid_argument, "segment size exceeds u32");
  const std::size_t len = bytes ? bytes->size() : 0;
  const std::size_t n = len == 0 ? 1 : (len + segment_size - 1) / segment_size;
  if (n >= kUnknownTotal) throw Error(ErrorCode::invalid_argument, "too many segments");
  std::vector<Segment> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t off = i * segment_size;
    const auto length = static_cast<std::uint32_t>(std::min(segment_size, len - std::min(len, off)));
    out.push_back(make_segment(version, static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(n), off, bytes,
                               off, length));
  }
  return out;
}

inline std::vector<Segment> segmentize(std::uint64_t version, ByteSpan bytes,
                                       std::size_t segment_size = kDefaultSegmentSize) {
  return segmentize(version, std::make_shared<const Bytes>(bytes.begin(), bytes.end()), segment_size);
}

// Stream for segment id i is i mod S.
inline std::size_t stream_of(std::uint32_t segment_id, std::size_t streams) { return segment_id % streams; }

inline std::vector<std::vector<Segment>> stripe(const std::vector<Segment>& segments, std::size_t streams) {
  if (streams < 1) throw Error(ErrorCode::invalid_argument, "stream count must be >= 1");
  std::vector<std::vector<Segment>> out(streams);
  for (const auto& s : segments) out[stream_of(s.header.segment_id, streams)].push_back(s);
  return out;
}

}  // namespace deltasync::transport
